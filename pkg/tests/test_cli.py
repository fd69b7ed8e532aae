import json

import numpy as np
import pytest

from fdnet.cli import RunConfig, main, parse_scales
from fdnet.data import read_netpbm, write_netpbm
from fdnet.network import ConfigError, FDNet, save_checkpoint, toy_spec
from fdnet.train import forward_probs

TOY_NETWORK = {
    "num_classes": 4,
    "block_depths": [2, 2, 2, 2],
    "growth_rate": 8,
    "init_channels": 16,
    "stride": 16,
    "dilation": 2,
    "wiring": "dense",
    "agg_widths": [64, 48],
    "block_widths": [48, 32],
    "reuse_widths": [24, 16, 8],
    "encoder_width": 48,
}


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def small_config(tmp_path):
    return write_json(
        tmp_path / "cfg.json",
        {
            "seed": 3,
            "network": TOY_NETWORK,
            "train": {"max_iter": 2, "batch_size": 2, "crop": 32, "base_lr": 0.0025},
            "loss": {"alpha": [2.0, 1.0], "kernels": [2], "mode": "exp", "lam": 0.75},
            "data": {"synthetic": {"seed": 1, "count": 3, "size": 32, "size_range": [5, 10]}},
        },
    )


class TestRunConfig:
    def test_defaults(self):
        cfg = RunConfig.from_dict({})
        assert cfg.network.stride == 16 and cfg.train.base_lr == 0.00025

    def test_seed_flows_to_train(self):
        assert RunConfig.from_dict({"seed": 9}).train.seed == 9

    @pytest.mark.parametrize(
        "raw,field",
        [
            ({"optimizer": {}}, "optimizer"),
            ({"network": {"stride": 8}}, "network.stride"),
            ({"train": {"momentum": 1.5}}, "train.momentum"),
            ({"loss": {"alpha": [1, 1]}}, "loss.alpha"),
            ({"data": {"synthetic": {"size": 8}}}, "data.synthetic.size"),
            ({"data": {"folder": "x"}}, "data.folder"),
        ],
    )
    def test_field_paths(self, raw, field):
        with pytest.raises(ConfigError) as err:
            RunConfig.from_dict(raw)
        assert err.value.field == field

    def test_scales(self):
        assert parse_scales("0.6:1.4:0.2") == [0.6, 0.8, 1.0, 1.2, 1.4]
        assert parse_scales("0.75,1") == [0.75, 1.0]


class TestCommands:
    def test_inspect_dense(self, tmp_path, capsys):
        cfg = write_json(tmp_path / "c.json", {"network": TOY_NETWORK})
        code, out, _ = run(capsys, "inspect", "--config", cfg)
        assert code == 0 and "aggregation edges: 15" in out

    def test_config_error_exit_2(self, tmp_path, capsys):
        cfg = write_json(tmp_path / "c.json", {"network": dict(TOY_NETWORK, wiring="sparse")})
        code, _, err = run(capsys, "inspect", "--config", cfg)
        assert code == 2 and "network.wiring" in err

    def test_bad_json_exit_2(self, tmp_path, capsys):
        path = tmp_path / "c.json"
        path.write_text("{not json")
        code, _, err = run(capsys, "inspect", "--config", str(path))
        assert code == 2 and "invalid JSON" in err

    def test_runtime_error_exit_1(self, tmp_path, capsys):
        code, _, err = run(capsys, "predict", "--checkpoint", str(tmp_path / "missing.fdn"), "--image", "x.ppm", "--out", "y.pgm")
        assert code == 1 and "error" in err

    def test_gradcheck_conv(self, capsys):
        code, out, _ = run(capsys, "gradcheck", "--ops", "conv2d")
        assert code == 0 and "3/3 checks passed" in out

    def test_gradcheck_unknown(self, capsys):
        code, _, err = run(capsys, "gradcheck", "--ops", "nope")
        assert code == 2 and "--ops" in err

    def test_bands(self, tmp_path, capsys):
        lab = np.zeros((64, 64), int)
        lab[:, 32:] = 1
        write_netpbm(lab, str(tmp_path / "l.pgm"))
        code, out, _ = run(capsys, "bands", "--labels", str(tmp_path / "l.pgm"), "--kernels", "2,4", "--out", str(tmp_path / "b.pgm"))
        bands = read_netpbm(str(tmp_path / "b.pgm"))
        assert code == 0 and "S1=384" in out
        assert set(np.unique(bands)) == {50, 100, 150}

    def test_gen_train_eval_predict(self, tmp_path, small_config, capsys):
        data_dir = tmp_path / "data"
        assert run(capsys, "gen", "--spec", small_config, "--out", str(data_dir))[0] == 0
        assert (data_dir / "manifest.json").exists()
        out_dir = tmp_path / "run"
        code, out, _ = run(capsys, "train", "--config", small_config, "--out", str(out_dir))
        assert code == 0
        assert (out_dir / "train_log.csv").read_text().startswith("iter,lr,loss,eval_miou\n")
        ckpt = str(out_dir / "model.fdn")
        code, out, _ = run(capsys, "eval", "--checkpoint", ckpt, "--data", str(data_dir), "--scales", "0.5,1.0", "--flip")
        metrics = json.loads(out)
        assert code == 0 and set(metrics["trimap"]) == {"1", "5", "10", "20", "40"}
        code, _, _ = run(capsys, "predict", "--checkpoint", ckpt, "--image", str(data_dir / "images" / "0000.ppm"), "--out", str(tmp_path / "p.pgm"))
        assert code == 0 and read_netpbm(str(tmp_path / "p.pgm")).shape == (32, 32)

    def test_train_deterministic(self, tmp_path, small_config, capsys):
        for run_dir in ("a", "b"):
            assert run(capsys, "train", "--config", small_config, "--out", str(tmp_path / run_dir))[0] == 0
        for name in ("model.fdn", "train_log.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_seed_flag_overrides(self, tmp_path, small_config, capsys):
        run(capsys, "train", "--config", small_config, "--out", str(tmp_path / "a"))
        run(capsys, "train", "--config", small_config, "--out", str(tmp_path / "b"), "--seed", "4")
        assert (tmp_path / "a" / "model.fdn").read_bytes() != (tmp_path / "b" / "model.fdn").read_bytes()

    @pytest.mark.parametrize("jobs", ["1", "2"])
    def test_eval_perfect_fixture(self, tmp_path, capsys, jobs):
        # labels are the network's own predictions, so every metric is exactly 1
        net = FDNet(toy_spec(), seed=0)
        net.eval()
        ckpt = tmp_path / "m.fdn"
        save_checkpoint(net, str(ckpt))
        rng = np.random.default_rng(0)
        data_dir = tmp_path / "d"
        (data_dir / "images").mkdir(parents=True)
        (data_dir / "labels").mkdir()
        idents = []
        for i in range(3):
            img = rng.integers(0, 256, (3, 32, 32)) / 255.0
            lab = forward_probs(net, img[None])[0].argmax(0)
            write_netpbm(img, str(data_dir / "images" / f"{i:04d}.ppm"))
            write_netpbm(lab, str(data_dir / "labels" / f"{i:04d}.pgm"))
            idents.append(f"{i:04d}")
        write_json(data_dir / "manifest.json", {"num_classes": 4, "ignore": 255, "channel_means": [0.5] * 3, "samples": idents})
        code, out, _ = run(capsys, "--jobs", jobs, "eval", "--checkpoint", str(ckpt), "--data", str(data_dir))
        metrics = json.loads(out)
        assert code == 0
        assert metrics["pixel_acc"] == metrics["mean_acc"] == metrics["miou"] == 1.0
        assert all(v in (None, 1.0) for v in metrics["trimap"].values())
