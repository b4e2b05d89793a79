import pytest

from stmamba.config import LRPhase, RunConfig, desk_preset, paper_preset


def test_json_roundtrip_desk_and_paper():
    for cfg in (desk_preset(3), paper_preset(size="B")):
        back = RunConfig.from_json(cfg.to_json())
        assert back == cfg
        assert back.to_json() == cfg.to_json()


def test_file_roundtrip(tmp_path):
    cfg = desk_preset()
    cfg.train.alpha = 0.0
    cfg.save(tmp_path / "c.json")
    assert RunConfig.load(tmp_path / "c.json") == cfg


def test_desk_geometry():
    cfg = desk_preset()
    assert cfg.vae.latent_shape(cfg.data.frames - 1, 32, 32) == (4, 8, 8, 8)
    assert cfg.model.tokens_per_frame == 64
    assert (cfg.model.d, cfg.model.depth) == (128, 4)


def test_paper_values():
    cfg = paper_preset()
    assert cfg.train.ema_decay == 0.9999
    assert cfg.train.clip_from_epoch == 25 and cfg.train.clip_norm == 1.0
    assert [(p.lr, p.batch_size) for p in cfg.train.phases] == [(1e-3, 16), (1e-4, 2)]
    assert cfg.vae_train.finetune_lr == 2e-7 and cfg.vae_train.betas == (0.5, 0.9)
    assert cfg.model.window == 8 and cfg.model.d_state == 128 and cfg.model.chunk_size == 256
    assert paper_preset(size="L").model.depth == 24


def test_unknown_field_rejected():
    d = desk_preset().to_dict()
    d["train"]["bogus"] = 1
    with pytest.raises(ValueError, match="bogus"):
        RunConfig.from_dict(d)


def test_mismatched_latent_rejected():
    cfg = desk_preset()
    cfg.model.in_channels = 4
    with pytest.raises(ValueError, match="latent"):
        cfg.check()


def test_phases_roundtrip_types():
    cfg = desk_preset()
    cfg.train.phases = [LRPhase(1e-3, 4, 2), LRPhase(1e-4, 2)]
    back = RunConfig.from_json(cfg.to_json())
    assert all(isinstance(p, LRPhase) for p in back.train.phases)
