import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from graphbackup.backup import BackupConfig, graph_backup_target
from graphbackup.envs import EmptyGrid
from graphbackup.estimators import BackupQLearner, BackupTargets
from graphbackup.learner import collect_random_walk
from graphbackup.values import ScalarQTable


@pytest.fixture(scope="module")
def data():
    return collect_random_walk(EmptyGrid(3), 600, seed=0)


def test_params_and_clone():
    est = BackupQLearner(operator="tree", depth=3)
    params = est.get_params()
    assert params["operator"] == "tree" and params["depth"] == 3
    other = clone(est).set_params(depth=4)
    assert other.depth == 4 and est.depth == 3


def test_learner_fit_predict(data):
    est = BackupQLearner(total_steps=1500, target_update_every=50).fit(data)
    env = EmptyGrid(3)
    start = env.reset(0)
    q = est.decision_function([start])
    assert q.shape == (1, 4)
    assert est.predict([start])[0] in (1, 2)  # right or down toward the goal
    assert est.metrics_.op == "graph"


def test_not_fitted():
    with pytest.raises(NotFittedError):
        BackupQLearner().predict([EmptyGrid(3).reset(0)])
    with pytest.raises(NotFittedError):
        BackupTargets().transform([])


def test_input_validation():
    with pytest.raises(ValueError):
        BackupQLearner().fit([])
    with pytest.raises(TypeError):
        BackupQLearner().fit([[("not", "a", "record")]])


def test_targets_match_operator(data):
    flat = [r for ep in data for r in ep]
    tr = BackupTargets(operator="graph", depth=3, breadth=1000).fit(data)
    out = tr.transform(flat[:20])
    zero = ScalarQTable(4)
    cfg = BackupConfig(operator="graph", depth=3, breadth=1000)
    want = [graph_backup_target(tr.graph_, (r.state, r.action), zero, zero, cfg) for r in flat[:20]]
    assert np.allclose(out, want, atol=1e-12)
    assert np.array_equal(BackupTargets(operator="one_step").fit_transform(data),
                          BackupTargets(operator="one_step").fit(data).transform(data))
