import numpy as np
import pytest
import torch

from shapewarp import training as T
from shapewarp.synthesis import SynthConfig


def tiny(stage, **kw):
    base = dict(epochs=1, batch_size=4, max_steps=2, seed=7)
    base.update(kw)
    return T.TrainConfig.for_stage(stage, **base)


def test_schedule_lr_examples():
    assert T.schedule_lr(0, 100, 1e-3) == 1e-3
    assert T.schedule_lr(50, 100, 1e-3) == 1e-3
    assert T.schedule_lr(75, 100, 1e-3) == pytest.approx(5e-4)
    assert T.schedule_lr(100, 100, 1e-3) == 0.0
    with pytest.raises(ValueError):
        T.schedule_lr(101, 100, 1e-3)
    with pytest.raises(ValueError):
        T.schedule_lr(-1, 100, 1e-3)


def test_stage_defaults():
    cfg = T.TrainConfig.for_stage("warp")
    assert cfg.epochs == 30 and cfg.betas == (0.5, 0.999) and cfg.optimizer == "adam"
    assert T.TrainConfig.for_stage("synth").optimizer == "adamw"


@pytest.mark.parametrize("bad", [dict(epochs=0), dict(lr=0.0), dict(optimizer="sgd"), dict(batch_size=0)])
def test_invalid_config_rejected(bad):
    with pytest.raises(T.ConfigError):
        T.TrainConfig.for_stage("warp", **bad)


def test_unknown_stage():
    with pytest.raises(T.ConfigError):
        T.TrainConfig.for_stage("paint")


def test_variant_tags():
    assert T.TrainConfig().variant == "full"
    assert T.TrainConfig(no_shape_attention=True).variant == "noatt"
    assert T.TrainConfig(no_cotrain=True).variant == "nocotrain"
    assert T.TrainConfig(stage="synth", no_limb_network=True).variant == "nolimb"
    assert T.tagged_checkpoint("out", "warp", "noatt").name == "warp_noatt"


def test_load_config_ini(tmp_path):
    ini = tmp_path / "cfg.ini"
    ini.write_text("[warp]\nepochs = 3\nlr = 0.01\nbetas = 0.9, 0.99\nno_cotrain = true\n[layout]\nepochs = 4\n")
    cfg = T.load_config(ini, "warp")
    assert (cfg.epochs, cfg.lr, cfg.betas, cfg.no_cotrain) == (3, 0.01, (0.9, 0.99), True)
    assert T.load_config(ini, "warp", epochs=9).epochs == 9
    assert T.load_config(ini, "layout").epochs == 4
    assert T.load_config(ini, "limb").epochs == 30


def test_load_config_errors(tmp_path):
    with pytest.raises(T.ConfigError):
        T.load_config(tmp_path / "missing.ini", "warp")
    ini = tmp_path / "bad.ini"
    ini.write_text("[warp]\nlearning_rate = 1\n")
    with pytest.raises(T.ConfigError):
        T.load_config(ini, "warp")
    ini.write_text("[warp]\nepochs = -2\n")
    with pytest.raises(T.ConfigError):
        T.load_config(ini, "warp")


def test_log_round_trip(tmp_path):
    entries = [{"epoch": 1, "loss": 0.5}, {"epoch": 2, "loss": 0.25, "iou": 0.9}]
    T.write_log(tmp_path / "log.jsonl", entries)
    assert T.read_log(tmp_path / "log.jsonl") == entries


@pytest.fixture(scope="module")
def trained(small_dataset):
    train, held = small_dataset[:12], small_dataset[12:]
    warp = T.train_warp(train, held, tiny("warp"))
    layout = T.train_layout(train, held, tiny("layout"))
    limb = T.train_limb(train, held, tiny("limb"))
    models = T.Models(warp.model, layout.model, limb.model)
    synth = T.train_synth(train, held, tiny("synth"), models, SynthConfig(steps=20, seed=7))
    return {"train": train, "held": held, "warp": warp, "layout": layout, "limb": limb,
            "synth": synth, "models": models}


def test_tiny_runs_log_and_are_deterministic(trained):
    for stage in ("warp", "layout", "limb"):
        res = trained[stage]
        assert res.log and np.isfinite(res.final_loss)
    again = T.train_warp(trained["train"], None, tiny("warp"))
    assert T.param_hash(again.model) == T.param_hash(trained["warp"].model)
    again = T.train_limb(trained["train"], None, tiny("limb"))
    assert T.param_hash(again.model) == T.param_hash(trained["limb"].model)


def test_different_seed_changes_weights(trained):
    other = T.train_layout(trained["train"], None, tiny("layout", seed=8))
    assert T.param_hash(other.model) != T.param_hash(trained["layout"].model)


def test_warp_eval_keys(trained):
    entry = trained["warp"].log[-1]
    for key in ("iou", "l1", "misalignment_mean", "flow_epe"):
        assert key in entry


def test_trend_probes(small_dataset):
    res = T.train_warp(small_dataset[:8], small_dataset[8:12], tiny("warp", eval_every=1, max_steps=2))
    assert [t["step"] for t in res.trend] == [0, 1, 2]


def test_synth_leaves_prerequisites_frozen(trained):
    models = trained["models"]
    assert models.synth is trained["synth"].model
    for net in (models.warp, models.layout, models.limb):
        assert not any(p.requires_grad for p in net.parameters())


def test_composites_and_no_limb_variant(trained):
    comp = T.build_composites(trained["models"], trained["held"])
    assert set(comp) == {"c_w", "m_w", "s_t", "l_r", "l_w", "i_occ", "i_com", "m"}
    assert comp["i_com"].shape == (4, 64, 48, 3)
    bare = T.build_composites(trained["models"], trained["held"], use_limbs=False)
    assert not bare["l_r"].any()


def test_infer_outputs_valid_images(trained):
    out = T.infer(trained["models"], trained["held"], seed=1)
    assert out.shape == (4, 64, 48, 3)
    assert np.isfinite(out).all() and out.min() >= 0 and out.max() <= 1


@pytest.mark.parametrize("stage", ["warp", "layout", "limb", "synth"])
def test_checkpoint_round_trip(trained, tmp_path, stage):
    model = trained[stage].model
    path = T.save_checkpoint(model, tmp_path / stage, stage, T.model_config_of(model), {"epochs": 1})
    loaded, meta = T.load_checkpoint(path)
    assert meta["stage"] == stage and meta["param_hash"] == T.param_hash(model)
    for (k, a), (k2, b) in zip(sorted(model.state_dict().items()), sorted(loaded.state_dict().items())):
        assert k == k2
        assert torch.allclose(a.float(), b.float(), atol=1e-7, rtol=0)


def test_missing_checkpoint(tmp_path):
    with pytest.raises(T.MissingArtifactError):
        T.load_checkpoint(tmp_path / "nothing")
