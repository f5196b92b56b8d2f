import json
import os

import numpy as np
import pytest
from hypothesis import given, strategies as st
from PIL import Image

from circlesnake.cli import main, render_overlay
from circlesnake.config import ConfigError, RunConfig, apply_overrides, dump_config, load_config, parse_config
from circlesnake.data.coco import read_coco, read_results
from circlesnake.geometry import Circle, sample_circle_contour
from circlesnake.model import InstancePrediction

from helpers import DATA

TINY = ["backbone_widths", "(8, 8, 8)", "head_conv", "8", "snake_width", "8", "num_vertices", "32"]


# -- configuration -------------------------------------------------------------

def test_paper_config_file_loads():
    cfg = load_config(str(DATA / "paper_config.yaml"))
    assert cfg.task == "circle_snake" and cfg.gpus == (0,)
    assert cfg.train.milestones == (60, 80, 100, 150) and cfg.train.lr == 2.5e-4
    assert cfg.heads == {"ct_hm": 4, "radius": 1, "reg": 2}
    assert (cfg.save_ep, cfg.eval_ep, cfg.ct_score) == (5, 5, 0.05)
    assert cfg.model_config().num_classes == 4


def test_paper_run_overrides():
    cfg = load_config(str(DATA / "paper_config.yaml"),
                      ["model", "CircleNet_eoe", "train.dataset", "eosTrain", "test.dataset", "eosTest",
                       "pretrain", "ctdet_coco_dla_2x_converted", "debug_train", "False",
                       "train.batch_size", "16"])
    assert cfg.train.batch_size == 16 and cfg.train.dataset == "eosTrain"
    assert cfg.debug_train is False
    cfg = load_config(str(DATA / "paper_config.yaml"),
                      ["test.epoch", "49", "ct_score", "0.2", "segm_or_bbox", "segm", "dice", "True",
                       "debug_test", "True", "save_images", "True", "rotate_reproduce", "False"])
    assert (cfg.test.epoch, cfg.ct_score, cfg.dice, cfg.save_images) == (49, 0.2, True, True)


def test_config_roundtrip_identity():
    cfg = load_config(str(DATA / "paper_config.yaml"), ["train.milestones", "(3, 9)", "seed", "4"])
    again = parse_config(dump_config(cfg))
    assert dump_config(again) == dump_config(cfg)
    assert again.train.milestones == (3, 9) and again.network == "ro_34"


@given(st.integers(1, 500), st.floats(1e-6, 1.0), st.booleans(), st.sampled_from(["segm", "bbox"]),
       st.lists(st.integers(1, 300), min_size=1, max_size=4), st.text("abcxyz_'", max_size=8))
def test_config_roundtrip_property(save_ep, lr, dice, mode, ms, name):
    cfg = RunConfig(save_ep=save_ep, dice=dice, segm_or_bbox=mode, model=name)
    cfg.train.lr = lr
    cfg.train.milestones = tuple(ms)
    again = parse_config(dump_config(cfg))
    assert again == RunConfig(**{**vars(again), "config_dir": "."}) and dump_config(again) == dump_config(cfg)
    assert again.train.lr == lr and again.model == name


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="trian"):
        parse_config("trian:\n    lr: 0.1\n")
    with pytest.raises(ConfigError, match="ct_scroe"):
        apply_overrides(RunConfig(), ["ct_scroe", "0.2"])
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), ["save_ep"])


def test_invalid_values_rejected():
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), ["train.batch_size", "many"])
    with pytest.raises(ConfigError):
        load_config(None, ["save_ep", "0"])
    with pytest.raises(ConfigError):
        load_config(None, ["heads", "{'ct_hm': 4, 'radius': 2, 'reg': 2}"])


# -- commands ------------------------------------------------------------------

@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["--type", "synth", "--seed", "2", "--scenes", "2", "--instances", "3",
                 "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def trained(synth_dir):
    cfg = str(synth_dir / "config.yaml")
    assert main(["--cfg_file", cfg, "train.epoch", "2", "save_ep", "1", "eval_ep", "1",
                 "pretrain", "ctdet_coco_dla_2x_converted"] + TINY) == 0
    return synth_dir


def test_synth_outputs(synth_dir):
    doc = read_coco((synth_dir / "synth.json").read_text())
    assert len(doc.images) == 2 and len(doc.annotations) == 6
    reg = json.loads((synth_dir / "datasets.json").read_text())
    assert set(reg) == {"eoeTrain", "eoeVal", "eoeTest"}
    assert (synth_dir / "images" / "scene_0000.png").exists()
    load_config(str(synth_dir / "config.yaml"))


def test_train_writes_checkpoints_and_log(trained):
    model_dir = trained / "model"
    assert sorted(os.listdir(model_dir)) == ["0.npz", "1.npz", "best.npz", "config.yaml", "train.log"]
    lines = (model_dir / "train.log").read_text().splitlines()
    steps = [l for l in lines if l.startswith("step=")]
    assert len(steps) == 4
    assert [kv.split("=")[0] for kv in steps[0].split()] == \
        ["step", "l_focal", "l_radius", "l_offset", "l_det", "l_iter", "lr"]
    assert any(l.startswith("epoch=1 ") and "val_ap50=" in l for l in lines)


def test_eos_dataset_alias(trained):
    assert main(["--cfg_file", str(trained / "config.yaml"), "train.epoch", "1", "train.dataset",
                 "eosTrain", "model_dir", "model_alias"] + TINY) == 0


def test_evaluate_reports(trained):
    cfg = str(trained / "config.yaml")
    assert main(["--type", "evaluate", "--cfg_file", cfg, "test.epoch", "1", "ct_score", "0.2",
                 "segm_or_bbox", "segm", "dice", "True", "save_images", "True"]) == 0
    res = trained / "result"
    kv = (res / "eval_epoch1_segm.kv").read_text()
    assert "AP50=" in kv and "Dice=" in kv
    assert (res / "eval_epoch1_segm.txt").exists()
    read_results((res / "eval_epoch1_segm_results.json").read_text())
    overlay = np.asarray(Image.open(res / "images" / "scene_0000_overlay.png"))
    assert overlay.shape == (512, 512, 3)


def test_evaluate_missing_epoch_lists_available(trained, caplog):
    rc = main(["--type", "evaluate", "--cfg_file", str(trained / "config.yaml"), "test.epoch", "49"])
    assert rc != 0
    assert "available epochs: [0, 1]" in caplog.text


def test_infer_outputs_and_determinism(trained, tmp_path):
    ck = str(trained / "model" / "1.npz")
    imgs = str(trained / "images")
    for out in ("a", "b"):
        assert main(["--type", "infer", "--checkpoint", ck, "--images", imgs, "--out",
                     str(tmp_path / out), "save_images", "True", "ct_score", "0.0"]) == 0
    a = (tmp_path / "a" / "scene_0000.json").read_text()
    assert a == (tmp_path / "b" / "scene_0000.json").read_text()
    recs = read_results(a)
    assert len(recs) == 100 and all("circle" in r for r in recs)
    assert np.asarray(Image.open(tmp_path / "a" / "scene_0001_overlay.png")).shape == (512, 512, 3)


def test_infer_all_unreadable_fails(trained, tmp_path):
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"not a png")
    rc = main(["--type", "infer", "--checkpoint", str(trained / "model" / "1.npz"),
               "--images", str(bad), "--out", str(tmp_path / "o")])
    assert rc != 0


def test_resume_from_corrupt_checkpoint_fails(trained, tmp_path):
    import shutil
    d = tmp_path / "m"
    shutil.copytree(trained / "model", d)
    (d / "1.npz").write_bytes(b"garbage")
    rc = main(["--cfg_file", str(trained / "config.yaml"), "resume", "true", "model_dir", str(d),
               "train.epoch", "3"] + TINY)
    assert rc != 0


def test_missing_dataset_fails(trained):
    rc = main(["--cfg_file", str(trained / "config.yaml"), "train.dataset", "nope"] + TINY)
    assert rc != 0


def _write_slide(root, name, size, anns):
    (root / "ann").mkdir(exist_ok=True)
    (root / "img").mkdir(exist_ok=True)
    Image.fromarray(np.full((size, size, 3), 180, np.uint8)).save(root / "img" / f"{name}.png")
    (root / "ann" / f"{name}.json").write_text(json.dumps(anns))


def test_prepare_one_slide(tmp_path, capsys):
    anns = [{"class": "Eos", "points": [[100, 100], [120, 100], [120, 120], [100, 120]]},
            {"class": "RBC", "points": [[600, 610], [630, 600], [640, 640]]},
            {"class": "RBC Cluster", "points": [[900, 900], [960, 900], [960, 960], [900, 960]]}]
    _write_slide(tmp_path, "wsi1", 1024, anns)
    out = tmp_path / "out"
    assert main(["--type", "prepare", "--annotations", str(tmp_path / "ann"), "--images",
                 str(tmp_path / "img"), "--out", str(out)]) == 0
    assert len(os.listdir(out / "patches")) == 9
    assert len(os.listdir(out / "masks")) == 36
    assert "wsi1_x256_y512.png" in os.listdir(out / "patches")
    train = read_coco((out / "train.json").read_text())
    assert len(train.images) == 9 and len(train.annotations) >= 3
    assert read_coco((out / "test.json").read_text()).images == []
    text = capsys.readouterr().out
    assert "Total" in text and "Eos" in text


def test_prepare_empty_dir(tmp_path):
    (tmp_path / "ann").mkdir()
    (tmp_path / "img").mkdir()
    out = tmp_path / "out"
    assert main(["--type", "prepare", "--annotations", str(tmp_path / "ann"), "--images",
                 str(tmp_path / "img"), "--out", str(out)]) == 0
    for s in ("train", "val", "test"):
        assert read_coco((out / f"{s}.json").read_text()).annotations == []
    assert "0" in (out / "stats.txt").read_text()


def test_prepare_bad_annotation_names_file(tmp_path, caplog):
    _write_slide(tmp_path, "w", 512, [{"class": "Dog", "points": [[0, 0], [5, 0], [5, 5]]}])
    rc = main(["--type", "prepare", "--annotations", str(tmp_path / "ann"), "--images",
               str(tmp_path / "img"), "--out", str(tmp_path / "o")])
    assert rc != 0 and "w.json" in caplog.text


def test_overlay_same_size():
    img = np.zeros((40, 70, 3), np.uint8)
    c = Circle(30, 20, 8, 1)
    out = render_overlay(img, [InstancePrediction(c, sample_circle_contour(c, 32), 1.0)])
    assert out.shape == img.shape and out.any()
