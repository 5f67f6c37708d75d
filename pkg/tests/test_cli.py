import numpy as np
import pytest
import yaml

from andes import cli
from andes.config import load_config
from andes.data import BandImage, RawScene, load_manifest, write_mst
from andes.errors import ConfigError
from andes.report import content_lines

TINY_CONFIG = {
    "seed": 5,
    "threads": 1,
    "data": {"tile_size": 28, "synth_tiles": 16, "synth_classes": 2},
    "vit": {"embed_dim": 32, "depth": 1, "heads": 2, "pos_grid": 2, "drop_path_rate": 0.1},
    "head": {"prototypes": 16, "bottleneck": 8, "hidden": 32},
    "crop": {"global_size": 28, "local_size": 14, "n_local": 2},
    "distill": {"total_steps": 4, "batch_size": 2, "lr_override": 1e-3},
    "probe": {"epochs": 2},
    "eval": {"k_folds": 2, "scales": [1.0], "seg_scales": [2], "k_list": [3], "checkpoint_every": 2},
}


@pytest.fixture()
def tiny_config(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(TINY_CONFIG))
    return path


@pytest.fixture()
def synth_dir(tmp_path, tiny_config):
    out = tmp_path / "data"
    assert cli.main(["synth", "--config", str(tiny_config), "--out", str(out)]) == 0
    return out


class TestConfig:
    def test_presets_resolve(self):
        desk = load_config(None, {"preset": "desk-micro"})
        assert desk.vit.embed_dim == 96 and desk.head.prototypes == 256
        paper = load_config(None, {"preset": "paper-vitl14"})
        assert paper.vit.embed_dim == 1024 and paper.vit.depth == 24
        assert paper.head.prototypes == 65536
        assert paper.distill.effective_lr() == pytest.approx(2e-4 * (512 / 1024) ** 0.5)

    def test_unknown_section_and_field_rejected(self, tmp_path):
        bad = tmp_path / "bad.yaml"
        bad.write_text("nonsense: {a: 1}\n")
        with pytest.raises(ConfigError, match="unknown config sections"):
            load_config(bad)
        bad.write_text("vit: {embed_dims: 64}\n")
        with pytest.raises(ConfigError, match="unknown ViTConfig fields"):
            load_config(bad)

    def test_flag_overrides_config(self, tiny_config):
        cfg = load_config(tiny_config, {"seed": 99})
        assert cfg.seed == 99
        assert load_config(tiny_config).seed == 5

    def test_digest_reflects_resolved_config(self, tiny_config):
        d1 = load_config(tiny_config).digest()
        d2 = load_config(tiny_config).digest()
        d3 = load_config(tiny_config, {"seed": 99}).digest()
        assert d1 == d2 != d3

    def test_bad_yaml_is_config_error(self, tmp_path):
        bad = tmp_path / "bad.yaml"
        bad.write_text("seed: [unclosed\n")
        with pytest.raises(ConfigError):
            load_config(bad)

    def test_unknown_preset(self):
        with pytest.raises(ConfigError, match="unknown preset"):
            load_config(None, {"preset": "nope"})


class TestSynthCommand:
    def test_writes_split_manifests(self, synth_dir):
        train = load_manifest(synth_dir / "train.manifest")
        val = load_manifest(synth_dir / "val.manifest")
        test = load_manifest(synth_dir / "test.manifest")
        assert len(train) + len(val) + len(test) == 16
        assert len(train) > len(val) and len(train) > len(test)
        assert (synth_dir / "synth.metrics").exists()

    def test_collision_without_force(self, tmp_path, tiny_config, synth_dir):
        assert cli.main(["synth", "--config", str(tiny_config), "--out", str(synth_dir)]) == 3
        assert cli.main(["synth", "--config", str(tiny_config), "--out", str(synth_dir), "--force"]) == 0

    def test_same_seed_same_tiles(self, tmp_path, tiny_config):
        out1, out2 = tmp_path / "s1", tmp_path / "s2"
        cli.main(["synth", "--config", str(tiny_config), "--out", str(out1)])
        cli.main(["synth", "--config", str(tiny_config), "--out", str(out2)])
        t1 = sorted((out1 / "tiles").iterdir())
        t2 = sorted((out2 / "tiles").iterdir())
        assert [p.name for p in t1] == [p.name for p in t2]
        assert all(a.read_bytes() == b.read_bytes() for a, b in zip(t1, t2))

    def test_imbalance_config(self, tmp_path):
        cfg = dict(TINY_CONFIG)
        cfg["data"] = dict(cfg["data"], synth_tiles=110, synth_imbalance="1:10")
        path = tmp_path / "imb.yaml"
        path.write_text(yaml.safe_dump(cfg))
        out = tmp_path / "imb"
        assert cli.main(["synth", "--config", str(path), "--out", str(out)]) == 0
        labels = np.concatenate(
            [load_manifest(out / f"{n}.manifest").labels() for n in ("train", "val", "test")]
        )
        assert int((labels == 1).sum()) == 10  # floor(110 / 11)


class TestIngestCommand:
    def test_black_scene_fully_dropped(self, tmp_path, tiny_config):
        scene = tmp_path / "black.mst"
        write_mst(scene, BandImage(np.zeros((8, 56, 56), dtype=np.uint8)))
        out = tmp_path / "ing"
        assert cli.main(["ingest", str(scene), "--config", str(tiny_config), "--out", str(out)]) == 0
        assert len(load_manifest(out / "ingest.manifest")) == 0
        text = (out / "ingest.metrics").read_text()
        assert "kept: 0" in text and "dropped: 4" in text

    def test_textured_scene_kept_and_conservation(self, tmp_path, tiny_config):
        rng = np.random.default_rng(0)
        textured = rng.integers(40, 200, size=(8, 56, 56), dtype=np.uint8)
        mixed = textured.copy()
        mixed[:, :28, :28] = 0  # one featureless tile out of four
        s1, s2 = tmp_path / "tex.mst", tmp_path / "mix.mst"
        write_mst(s1, BandImage(textured))
        write_mst(s2, BandImage(mixed))
        out = tmp_path / "ing2"
        assert cli.main(["ingest", str(s1), str(s2), "--config", str(tiny_config), "--out", str(out)]) == 0
        text = (out / "ingest.metrics").read_text()
        assert "kept: 7" in text and "dropped: 1" in text

    def test_f32_scene_quantized(self, tmp_path, tiny_config):
        rng = np.random.default_rng(1)
        scene = RawScene(rng.normal(size=(8, 28, 28)).astype(np.float32))
        path = tmp_path / "f32.mst"
        write_mst(path, scene)
        out = tmp_path / "ing3"
        assert cli.main(["ingest", str(path), "--config", str(tiny_config), "--out", str(out)]) == 0
        assert len(load_manifest(out / "ingest.manifest")) == 1

    def test_malformed_scene_names_file(self, tmp_path, tiny_config, capsys):
        bad = tmp_path / "broken.mst"
        bad.write_bytes(b"JUNKJUNKJUNK")
        out = tmp_path / "ing4"
        assert cli.main(["ingest", str(bad), "--config", str(tiny_config), "--out", str(out)]) == 3
        assert "broken.mst" in capsys.readouterr().err


class TestPretrainCommand:
    def test_short_run_writes_log_and_checkpoints(self, tmp_path, tiny_config, synth_dir):
        out = tmp_path / "run"
        rc = cli.main([
            "pretrain", "--config", str(tiny_config), "--out", str(out),
            "--manifest", str(synth_dir / "train.manifest"),
        ])
        assert rc == 0
        log_lines = [l for l in (out / "pretrain.log").read_text().splitlines() if not l.startswith("#")]
        assert len(log_lines) == 4  # exactly one record per step
        assert (out / "checkpoints" / "final.ckpt").exists()
        assert (out / "checkpoints" / "step_0000002.ckpt").exists()

    def test_resume_matches_straight_run(self, tmp_path, tiny_config, synth_dir):
        manifest = str(synth_dir / "train.manifest")
        straight = tmp_path / "straight"
        cli.main(["pretrain", "--config", str(tiny_config), "--out", str(straight), "--manifest", manifest])

        half = tmp_path / "half"
        cli.main(["pretrain", "--config", str(tiny_config), "--out", str(half),
                  "--manifest", manifest, "--steps", "2"])
        cli.main(["pretrain", "--config", str(tiny_config), "--out", str(half), "--manifest", manifest,
                  "--resume", str(half / "checkpoints" / "final.ckpt"), "--steps", "4"])

        def digest_of(out):
            for line in (out / "pretrain.metrics").read_text().splitlines():
                if line.startswith("param_digest:"):
                    return line.split()[1]
        assert digest_of(straight) == digest_of(half)


class TestEvalCommands:
    @pytest.fixture()
    def trained(self, tmp_path, tiny_config, synth_dir):
        out = tmp_path / "pre"
        cli.main(["pretrain", "--config", str(tiny_config), "--out", str(out),
                  "--manifest", str(synth_dir / "train.manifest")])
        return out / "checkpoints" / "final.ckpt"

    def test_embed_then_retrieve_deterministic(self, tmp_path, tiny_config, synth_dir, trained):
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        for out in (out1, out2):
            rc = cli.main(["retrieve", "--config", str(tiny_config), "--out", str(out),
                           "--manifest", str(synth_dir / "train.manifest"), "--checkpoint", str(trained)])
            assert rc == 0
        d1 = content_lines((out1 / "retrieve.metrics").read_text())
        d2 = content_lines((out2 / "retrieve.metrics").read_text())
        assert d1 == d2
        assert any("map_at_k" in l and "k=3" in l for l in d1)

    def test_embed_writes_db(self, tmp_path, tiny_config, synth_dir, trained):
        out = tmp_path / "emb"
        rc = cli.main(["embed", "--config", str(tiny_config), "--out", str(out),
                       "--manifest", str(synth_dir / "train.manifest"), "--checkpoint", str(trained)])
        assert rc == 0
        from andes.probe import load_embeddings
        db = load_embeddings(out / "embeddings.emb")
        assert db.vectors.shape[1] == 32

    def test_retrieve_from_saved_embeddings(self, tmp_path, tiny_config, synth_dir, trained):
        emb_out = tmp_path / "emb2"
        cli.main(["embed", "--config", str(tiny_config), "--out", str(emb_out),
                  "--manifest", str(synth_dir / "train.manifest"), "--checkpoint", str(trained)])
        out = tmp_path / "ret"
        rc = cli.main(["retrieve", "--config", str(tiny_config), "--out", str(out),
                       "--embeddings", str(emb_out / "embeddings.emb")])
        assert rc == 0

    def test_classify_scratch(self, tmp_path, tiny_config, synth_dir):
        out = tmp_path / "cls"
        rc = cli.main(["classify", "--config", str(tiny_config), "--out", str(out),
                       "--manifest", str(synth_dir / "train.manifest")])
        assert rc == 0
        text = (out / "classify.metrics").read_text()
        assert "backbone: scratch" in text
        assert "f1_mean" in text

    def test_segment_runs(self, tmp_path, tiny_config, synth_dir, trained):
        out = tmp_path / "seg"
        rc = cli.main(["segment", "--config", str(tiny_config), "--out", str(out),
                       "--manifest", str(synth_dir / "train.manifest"), "--checkpoint", str(trained)])
        assert rc == 0
        assert "dice_mean" in (out / "segment.metrics").read_text()

    def test_sweep_compares_models(self, tmp_path, tiny_config, synth_dir, trained):
        out = tmp_path / "sw"
        rc = cli.main(["sweep", "--config", str(tiny_config), "--out", str(out),
                       "--manifest", str(synth_dir / "train.manifest"),
                       "--checkpoints", str(trained), "--include-scratch"])
        assert rc == 0
        text = (out / "sweep.metrics").read_text()
        assert "model=scratch" in text and "model=final" in text

    def test_config_error_exit_code(self, tmp_path):
        bad = tmp_path / "bad.yaml"
        bad.write_text("vit: {embed_dims: 7}\n")
        assert cli.main(["synth", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2

    def test_missing_manifest_is_config_error(self, tiny_config, tmp_path):
        rc = cli.main(["retrieve", "--config", str(tiny_config), "--out", str(tmp_path / "y")])
        assert rc == 2
