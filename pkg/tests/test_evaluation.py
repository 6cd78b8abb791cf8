import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pspinn.components import LinearModel
from pspinn.dataset import PointSet, generate_labeled
from pspinn.errors import DimensionMismatch, EmptySolution, IoFailure
from pspinn.evaluation import (
    TimingRow,
    TimingTable,
    bench_inference,
    evaluate,
    export_overlays,
    metrics_from_errors,
    predict_trajectories,
)
from pspinn.nn import init_mlp
from pspinn.solver import SolveConfig

CONST = LinearModel(np.zeros((2, 2)))


def identity_net():
    # x_hat(x0, t) = x0: the exact solution of the constant model
    m = init_mlp([3, 2], 0, [-1.0, -1.0, -1.0], [1.0, 1.0, 1.0], activation="identity")
    m.weights[0][...] = [[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]]
    return m


@pytest.fixture(scope="module")
def const_points():
    _, p = generate_labeled(CONST, [[0.2, -0.3], [0.5, 0.1]], 1.0, 0.1)
    return p


class TestMetrics:
    def test_perfect_model(self, const_points):
        m = evaluate(identity_net(), const_points)
        assert m.mae < 1e-16 and m.mse < 1e-32 and m.max_ae < 1e-16

    def test_single_error(self):
        m = metrics_from_errors(np.array([[0.5]]), [0.0])
        assert (m.mae, m.mse, m.max_ae) == (0.5, 0.25, 0.5)

    def test_per_state_and_timestep(self):
        err = np.array([[0.1, 0.3], [0.2, 0.0], [0.4, 0.4]])
        m = metrics_from_errors(err, [0.0, 1.0, 0.0], ("a", "b"))
        assert np.allclose(m.per_state["mae"], [0.7 / 3, 0.7 / 3])
        assert np.allclose(m.per_state["max_ae"], [0.4, 0.4])
        assert m.per_timestep["t"].tolist() == [0.0, 1.0]
        assert np.allclose(m.per_timestep["mae"], [0.3, 0.1])
        assert np.allclose(m.per_timestep["max_ae"], [0.4, 0.2])

    @given(st.lists(st.lists(st.floats(0, 1e3), min_size=3, max_size=3), min_size=1, max_size=40))
    def test_metric_algebra(self, rows):
        err = np.array(rows)
        m = metrics_from_errors(err, np.zeros(len(err)))
        assert 0 <= m.mae <= m.max_ae * (1 + 1e-12)
        assert m.mse <= m.max_ae**2 * (1 + 1e-12)
        assert m.mse >= m.mae**2 * (1 - 1e-12)

    def test_order_invariance(self, const_points):
        net = init_mlp([3, 5, 2], 4)
        perm = np.random.default_rng(0).permutation(len(const_points))
        a = evaluate(net, const_points)
        b = evaluate(net, const_points.select(perm))
        assert a.mae == pytest.approx(b.mae, rel=1e-14) and a.max_ae == b.max_ae

    def test_report_is_plain(self, const_points):
        text = evaluate(init_mlp([3, 5, 2], 4), const_points, ("a", "b")).to_report()
        assert "np.float64" not in text and text.splitlines()[-1].startswith("b, ")

    def test_dimension_mismatch(self, const_points):
        with pytest.raises(DimensionMismatch):
            evaluate(init_mlp([3, 4, 3], 0), const_points)

    def test_empty(self):
        with pytest.raises(EmptySolution):
            evaluate(identity_net(), PointSet.empty(2))


class TestBench:
    def test_rows_and_spread(self):
        ics = [np.zeros((1, 2)), np.ones((3, 2))]
        table = bench_inference(identity_net(), CONST, ics, SolveConfig(), dt=0.1, repeats=3)
        assert table.sizes() == [1, 3]
        for r in table.rows:
            assert r.wall_ms > 0 and r.repeats == 3 and r.min_ms <= r.wall_ms <= r.max_ms

    def test_empty_set_skipped(self):
        table = bench_inference(identity_net(), CONST, [np.empty((0, 2))], dt=0.1)
        assert table.rows == []

    def test_too_few_repeats(self):
        with pytest.raises(ValueError):
            bench_inference(identity_net(), CONST, [np.zeros((1, 2))], repeats=2)

    def test_text_layout(self):
        t = TimingTable([TimingRow("solver", 1, 2.0, 5, 1.0, 3.0), TimingRow("surrogate", 1, 0.5, 5, 0.4, 0.6)])
        lines = t.to_text().splitlines()
        assert lines[0] == "Used Method | 1 Trajectories"
        assert lines[1].startswith("ODE solver | 2.000") and lines[2].startswith("PINN | 0.500")
        assert t.to_csv().splitlines()[0] == "method,n_trajectories,wall_ms,repeats,min_ms,max_ms"


class TestOverlays:
    def test_files(self, tmp_path):
        ics = np.array([[0.1, 0.2], [0.3, 0.4], [0.5, 0.6]])
        files = export_overlays(identity_net(), CONST, ics, tmp_path, 1.0, 0.01)
        assert [f.name for f in files] == ["overlay_000.csv", "overlay_001.csv", "overlay_002.csv", "error_curve.csv"]
        data = np.loadtxt(files[0], delimiter=",", skiprows=1)
        assert data.shape == (101, 5)
        assert np.allclose(data[:, 1:3], data[:, 3:5], atol=1e-15)
        assert files[0].read_text().splitlines()[0] == "t,x_true_x1,x_true_x2,x_pred_x1,x_pred_x2"

    def test_empty(self, tmp_path):
        with pytest.raises(EmptySolution):
            export_overlays(identity_net(), CONST, np.empty((0, 2)), tmp_path)

    def test_unwritable(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(IoFailure):
            export_overlays(identity_net(), CONST, [[0.0, 0.0]], blocker / "sub")

    def test_predict_shape(self):
        out = predict_trajectories(identity_net(), np.ones((4, 2)), np.linspace(0, 1, 7))
        assert out.shape == (4, 7, 2)
