import numpy as np
import pytest

from gaitprop.config import parse_config
from gaitprop.data import Dataset
from gaitprop.errors import SingularMatrixError
from gaitprop.layers import DenseLayer, Network
from gaitprop.training import METRICS_HEADER, MetricsLog, Trainer, TrainingError, evaluate, load_datasets, run_training

BASE = """
[experiment]
algorithm = {alg}
seed = 2
epochs = {epochs}
batch_size = 16
max_steps = {steps}
[data]
classes = 4
features = 16
per_class = 40
test_per_class = 20
[model]
layers = dense 16, dense 16, dense 4
slope = 0.5
[credit]
eta = 1e-4
gamma = 1e-3
beta = 0.01
[measure]
angles = {angles}
"""


def _cfg(alg="gp", epochs=1, steps=0, angles="true"):
    return parse_config(BASE.format(alg=alg, epochs=epochs, steps=steps, angles=angles))


class TestMetricsLog:
    def test_csv_format(self, tmp_path):
        log = MetricsLog()
        log.append(0, 0, "all", "loss", 0.5)
        log.append(0, 0, 1, "angle_deg", 1.25)
        path = tmp_path / "m.csv"
        log.write_csv(path)
        raw = path.read_bytes()
        assert raw == b"step,epoch,layer,metric,value\n0,0,all,loss,0.5\n0,0,1,angle_deg,1.25\n"
        assert MetricsLog.read_csv(path).rows == log.rows

    def test_monotonic(self):
        log = MetricsLog()
        log.append(3, 0, "all", "loss", 1.0)
        with pytest.raises(ValueError):
            log.append(2, 0, "all", "loss", 1.0)

    def test_header_constant(self):
        assert METRICS_HEADER == "step,epoch,layer,metric,value"


class TestEvaluate:
    def _identity_net(self, n):
        return Network([DenseLayer(np.eye(n), np.zeros(n), slope=1.0)], (n,))

    def test_perfect(self):
        ds = Dataset(np.eye(4)[[0, 1, 2, 3, 1]], np.array([0, 1, 2, 3, 1]), 4)
        assert evaluate(self._identity_net(4), ds) == 1.0

    def test_constant_logits_top_k(self):
        ds = Dataset(np.zeros((6, 3)), np.array([0, 1, 2, 0, 1, 2]), 3)
        net = self._identity_net(3)
        assert evaluate(net, ds, k=3) == 1.0
        # ties go to the lowest index
        assert evaluate(net, ds, k=1) == pytest.approx(1 / 3)

    def test_chance_level(self):
        rng = np.random.default_rng(0)
        ds = Dataset(rng.standard_normal((20_000, 10)), rng.integers(0, 10, 20_000), 10)
        acc = evaluate(self._identity_net(10), ds)
        assert abs(acc - 0.1) <= 0.02

    def test_empty(self):
        assert evaluate(self._identity_net(2), Dataset(np.zeros((0, 2)), np.zeros(0), 2)) == 0.0


class TestTrainer:
    def test_bit_identical_runs(self, tmp_path):
        a = run_training(_cfg(epochs=2), out_dir=tmp_path / "a")
        b = run_training(_cfg(epochs=2), out_dir=tmp_path / "b")
        assert a.rows == b.rows
        assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()

    def test_metric_kinds(self):
        log = run_training(_cfg())
        kinds = {r[3] for r in log.rows}
        assert kinds == {"loss", "angle_deg", "target_distance", "ortho_residual", "train_acc", "test_acc"}
        assert len(log.select("train_acc")) == 1

    @pytest.mark.parametrize("alg", ["fa", "gp", "vgp", "tp"])
    def test_reference_bp_isolation(self, alg):
        cfg_on, cfg_off = _cfg(alg, steps=12), _cfg(alg, steps=12, angles="false")
        train, test = load_datasets(cfg_on)
        on, off = Trainer(cfg_on), Trainer(cfg_off)
        on.run(train, test)
        off.run(train, test)
        for p, q in zip(on.net.params(), off.net.params()):
            for k in p:
                assert p[k].tobytes() == q[k].tobytes()
        assert on.log.select("angle_deg") and not off.log.select("angle_deg")

    def test_bp_logs_no_angles(self):
        log = run_training(_cfg("bp", steps=5))
        assert not log.select("angle_deg")

    def test_max_steps(self):
        trainer = Trainer(_cfg(steps=7))
        train, test = load_datasets(trainer.cfg)
        trainer.run(train, test)
        assert trainer.step == 7

    def test_angle_stride(self):
        cfg = _cfg(steps=10)
        cfg.angle_stride = 4
        log = run_training(cfg)
        assert sorted({r[0] for r in log.select("angle_deg")}) == [0, 4, 8]

    def test_orthogonality_health(self):
        log = run_training(_cfg(epochs=3))
        assert log.values("ortho_residual").max() < 0.1

    def test_errors_carry_step_and_layer(self):
        trainer = Trainer(_cfg())
        train, test = load_datasets(trainer.cfg)
        trainer.net.layers[1].W[:] = 0.0
        trainer.net.mark_updated()
        with pytest.raises(TrainingError) as info:
            trainer.run(train, test)
        assert info.value.step == 0 and info.value.layer == 1
        assert isinstance(info.value.cause, SingularMatrixError)

    def test_float32_run(self):
        cfg = _cfg(steps=5)
        cfg.precision = 32
        trainer = Trainer(cfg)
        train, test = load_datasets(cfg)
        trainer.run(train, test)
        assert trainer.net.layers[0].W.dtype == np.float32

    def test_bp_learns_separable_data(self):
        cfg = parse_config("[experiment]\nepochs = 5\n[model]\nlayers = dense 64, dense 64, dense 64, dense 10\n")
        log = run_training(cfg)
        assert log.values("train_acc")[-1] >= 0.99
