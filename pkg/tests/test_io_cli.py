import numpy as np
import pytest

from eslift import cli, io
from eslift.cryoem import phantom_volume
from eslift.esl import LiftedWeights
from eslift.manifold import quat_canonical, quat_mul, random_rotations


class TestEslt:
    def test_roundtrip_bitwise(self, tmp_path):
        rng = np.random.default_rng(0)
        for shape in ((7,), (3, 5), (4, 4, 4), (2, 3, 4, 5)):
            x = rng.standard_normal(shape).astype(np.float32)
            path = tmp_path / "t.eslt"
            io.write_eslt(path, x)
            back = io.read_eslt(path)
            assert back.dtype == np.float32
            assert np.array_equal(back, x)

    def test_header_layout(self, tmp_path):
        path = tmp_path / "t.eslt"
        io.write_eslt(path, np.zeros((2, 3), dtype=np.float32))
        raw = path.read_bytes()
        assert raw[:4] == b"ESLT"
        assert raw[4] == 1 and raw[5] == 1 and raw[6] == 2 and raw[7] == 0
        assert int.from_bytes(raw[8:12], "little") == 2
        assert int.from_bytes(raw[12:16], "little") == 3
        assert len(raw) == 16 + 4 * 6

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.eslt"
        path.write_bytes(b"NOPE" + bytes(12))
        with pytest.raises(ValueError):
            io.read_eslt(path)

    def test_truncated_rejected(self, tmp_path):
        path = tmp_path / "t.eslt"
        io.write_eslt(path, np.zeros(8, dtype=np.float32))
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(ValueError):
            io.read_eslt(path)


class TestRotationsCsv:
    def test_roundtrip_bitwise(self, tmp_path):
        rng = np.random.default_rng(1)
        q = random_rotations(37, rng)
        path = tmp_path / "r.csv"
        io.write_rotations_csv(path, q)
        back = io.read_rotations_csv(path)
        assert np.array_equal(back, q)

    def test_write_canonicalises(self, tmp_path):
        q = random_rotations(5, np.random.default_rng(2))
        path = tmp_path / "r.csv"
        io.write_rotations_csv(path, -q)
        assert np.array_equal(io.read_rotations_csv(path), q)

    def test_non_unit_rejected(self, tmp_path):
        path = tmp_path / "r.csv"
        path.write_text("index,qw,qx,qy,qz\n0,1.0,0.1,0.0,0.0\n")
        with pytest.raises(ValueError):
            io.read_rotations_csv(path)


class TestWeightsAndMetricsCsv:
    def test_weights_roundtrip(self, tmp_path):
        rng = np.random.default_rng(3)
        weights = []
        for _ in range(3):
            idx = np.sort(rng.choice(100, size=4, replace=False))
            val = rng.dirichlet(np.ones(4))
            weights.append(LiftedWeights(indices=idx, values=val, n_total=100))
        path = tmp_path / "w.csv"
        io.write_weights_csv(path, weights)
        back = io.read_weights_csv(path, 100)
        for w, (idx, val) in zip(weights, back):
            assert np.array_equal(w.indices, idx)
            assert np.array_equal(w.values, val)

    def test_metrics_write_and_append(self, tmp_path):
        path = tmp_path / "m.csv"
        row = {"iter": 1, "mean_err_deg": 2.0, "std_err_deg": 0.5,
               "mean_l0": 9.5, "mean_w2_deg": 3.25, "mean_gamma": 30.0,
               "objective": 123.456}
        io.append_metrics_row(path, row)
        io.append_metrics_row(path, {**row, "iter": 2})
        lines = path.read_text().strip().splitlines()
        assert lines[0] == ",".join(io.METRICS_HEADER)
        assert len(lines) == 3

    def test_config_file(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("# comment\neta=0.5\n\nmesh-level=1\n")
        assert io.read_config_file(path) == {"eta": "0.5", "mesh-level": "1"}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Tiny end-to-end CLI workspace: phantom volume + generated stack."""
    root = tmp_path_factory.mktemp("cli")
    vol = phantom_volume(16, 1.0)
    io.write_eslt(root / "gt.eslt", vol.data)
    rc = cli.main(["gen-data", "--volume", str(root / "gt.eslt"),
                   "--num-images", "6", "--snr", "0.25", "--seed", "11",
                   "--out-dir", str(root / "data")])
    assert rc == 0
    return root


class TestCli:
    def test_gen_data_outputs(self, workspace):
        data = workspace / "data"
        assert (data / "images.eslt").is_file()
        assert (data / "gt_rotations.csv").is_file()
        assert (data / "params.txt").is_file()
        images = io.read_eslt(data / "images.eslt")
        assert images.shape == (6, 16, 16)

    def test_gen_data_deterministic(self, workspace, tmp_path):
        rc = cli.main(["gen-data", "--volume", str(workspace / "gt.eslt"),
                       "--num-images", "6", "--snr", "0.25", "--seed", "11",
                       "--out-dir", str(tmp_path / "again")])
        assert rc == 0
        a = (workspace / "data" / "images.eslt").read_bytes()
        b = (tmp_path / "again" / "images.eslt").read_bytes()
        assert a == b
        assert (workspace / "data" / "gt_rotations.csv").read_bytes() == \
            (tmp_path / "again" / "gt_rotations.csv").read_bytes()

    def test_missing_input_exits_2(self, workspace, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.main(["gen-data", "--volume", str(workspace / "nope.eslt"),
                      "--out-dir", str(workspace / "x")])
        assert exc.value.code == 2

    def test_estimate_rotations(self, workspace):
        out = workspace / "est"
        out.mkdir(exist_ok=True)
        rc = cli.main([
            "estimate-rotations",
            "--volume", str(workspace / "gt.eslt"),
            "--images", str(workspace / "data" / "images.eslt"),
            "--mesh-level", "0", "--eta", "0.5", "--chunk", "700",
            "--threads", "1",
            "--out-rotations", str(out / "rotations.csv"),
            "--out-weights", str(out / "weights.csv"),
            "--out-metrics", str(out / "metrics.csv"),
            "--gt-rotations", str(workspace / "data" / "gt_rotations.csv"),
        ])
        assert rc == 0
        rots = io.read_rotations_csv(out / "rotations.csv")
        assert rots.shape == (6, 4)
        header = (out / "metrics.csv").read_text().splitlines()[0]
        assert header == ",".join(io.METRICS_HEADER)
        assert (out / "weights.csv").read_text().splitlines()[0] == \
            ",".join(io.WEIGHTS_HEADER)

    def test_refine_smoke(self, workspace):
        out = workspace / "refine"
        rc = cli.main([
            "refine",
            "--images", str(workspace / "data" / "images.eslt"),
            "--init-volume", str(workspace / "gt.eslt"),
            "--mesh-level", "0", "--eta", "0.5", "--iters", "2",
            "--chunk", "700", "--threads", "1",
            "--out-dir", str(out),
            "--gt-rotations", str(workspace / "data" / "gt_rotations.csv"),
        ])
        assert rc == 0
        lines = (out / "metrics.csv").read_text().strip().splitlines()
        assert len(lines) == 3  # header + one row per iteration
        assert (out / "volume_1.eslt").is_file()
        assert (out / "volume_2.eslt").is_file()
        assert (out / "rotations.csv").is_file()

    def test_eval_identical_sets(self, workspace, tmp_path, capsys):
        gt = workspace / "data" / "gt_rotations.csv"
        out = tmp_path / "eval.csv"
        rc = cli.main(["eval", "--est", str(gt), "--gt", str(gt),
                       "--out", str(out)])
        assert rc == 0
        rows = out.read_text().strip().splitlines()[1:]
        errs = [float(r.split(",")[1]) for r in rows]
        assert max(errs) < 1e-6

    def test_eval_gauge_rotated(self, workspace, tmp_path):
        gt = io.read_rotations_csv(workspace / "data" / "gt_rotations.csv")
        gauge = random_rotations(1, np.random.default_rng(5))[0]
        est = quat_canonical(quat_mul(gauge, gt))
        est_path = tmp_path / "est.csv"
        io.write_rotations_csv(est_path, est)
        out = tmp_path / "eval.csv"
        rc = cli.main(["eval", "--est", str(est_path),
                       "--gt", str(workspace / "data" / "gt_rotations.csv"),
                       "--out", str(out)])
        assert rc == 0
        rows = out.read_text().strip().splitlines()[1:]
        errs = [float(r.split(",")[1]) for r in rows]
        assert max(errs) < 1e-6

    def test_eval_length_mismatch_exits_2(self, workspace, tmp_path):
        gt = io.read_rotations_csv(workspace / "data" / "gt_rotations.csv")
        est_path = tmp_path / "short.csv"
        io.write_rotations_csv(est_path, gt[:3])
        with pytest.raises(SystemExit) as exc:
            cli.main(["eval", "--est", str(est_path),
                      "--gt", str(workspace / "data" / "gt_rotations.csv"),
                      "--out", str(tmp_path / "o.csv")])
        assert exc.value.code == 2

    def test_so3_mesh_export(self, tmp_path):
        out = tmp_path / "mesh.csv"
        rc = cli.main(["so3-mesh", "--level", "0", "--out", str(out)])
        assert rc == 0
        rots = io.read_rotations_csv(out)
        assert rots.shape == (1821, 4)
        first = out.read_bytes()
        cli.main(["so3-mesh", "--level", "0", "--out", str(out)])
        assert out.read_bytes() == first

    def test_lds_check(self, tmp_path):
        out = tmp_path / "lds.csv"
        rc = cli.main(["lds-check", "--eta", "0.5", "--b", "1.0",
                       "--levels", "7", "--out", str(out)])
        assert rc == 0
        lines = out.read_text().strip().splitlines()
        assert len(lines) == 8
        assert lines[1].startswith("1,1,")

    def test_lds_check_eta_out_of_range_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["lds-check", "--eta", "2.5"])
        assert exc.value.code == 2

    def test_config_file_overridden_by_flags(self, workspace, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("level=1\n")
        out = tmp_path / "mesh.csv"
        # config sets level 1, the explicit flag wins with level 0
        rc = cli.main(["so3-mesh", "--config", str(cfg), "--level", "0",
                       "--out", str(out)])
        assert rc == 0
        assert io.read_rotations_csv(out).shape == (1821, 4)

    def test_config_file_sets_defaults(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("level=0\n")
        out = tmp_path / "mesh.csv"
        rc = cli.main(["so3-mesh", "--config", str(cfg), "--out", str(out)])
        assert rc == 0
        assert io.read_rotations_csv(out).shape == (1821, 4)
