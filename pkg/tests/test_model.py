import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from contrastlab.data import AugmentationPolicy
from contrastlab.errors import (
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigError,
    ContractError,
    DimensionError,
    MissingArtifactError,
)
from contrastlab.model import (
    KeyQueue,
    ModelConfig,
    Objective,
    classify,
    clone_state,
    encode,
    forward_stages,
    init_model,
    load_checkpoint,
    momentum_update,
    project,
    read_checkpoint,
    save_checkpoint,
)
from contrastlab.numerics import OptimizerState, RngStream, Tensor
from contrastlab.objectives import make_batch, train_step


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def make_state(encoder, objective="SelfSupCon", seed=0, **kw):
    cfg = ModelConfig(encoder, num_classes=3, objective=objective, queue_size=kw.pop("queue_size", 8), **kw)
    return init_model(cfg, RngStream(seed, "init"))


# forward_stages


def test_zero_weights_give_zero_activations(tiny_encoder):
    state = make_state(tiny_encoder, "CE")
    for name, p in state.params.items():
        p.data = np.zeros_like(p.data)
    x = np.random.default_rng(0).uniform(size=(5, 16))
    for a in forward_stages(x, state.params):
        np.testing.assert_array_equal(a.data, 0.0)


def test_identity_stage_is_relu():
    x = np.random.default_rng(1).normal(size=(4, 6))
    params = {"enc.0.W": Tensor(np.eye(6)), "enc.0.b": Tensor(np.zeros(6))}
    (act,) = forward_stages(x, params)
    np.testing.assert_array_equal(act.data, np.maximum(x, 0.0))


def test_two_stage_composition_oracle(tiny_encoder):
    state = make_state(tiny_encoder, "CE")
    p = {k: v.data for k, v in state.params.items()}
    x = np.random.default_rng(2).uniform(size=(7, 16))
    h1 = np.maximum(x @ p["enc.0.W"].T + p["enc.0.b"], 0)
    h2 = np.maximum(h1 @ p["enc.1.W"].T + p["enc.1.b"], 0)
    acts = forward_stages(x, state.params)
    assert [a.shape for a in acts] == [(7, 12), (7, 8)]
    np.testing.assert_allclose(acts[0].data, h1, atol=1e-12)
    np.testing.assert_allclose(acts[1].data, h2, atol=1e-12)
    np.testing.assert_array_equal(encode(x, state.params).data, acts[-1].data)


def test_forward_shape_mismatch(tiny_encoder):
    state = make_state(tiny_encoder, "CE")
    with pytest.raises(DimensionError):
        forward_stages(np.zeros((2, 15)), state.params)


def test_heads_are_independent(tiny_encoder):
    state = make_state(tiny_encoder, "CE+SelfSupCon")
    assert {"cls.W", "cls.b"} <= set(state.params)
    assert {"proj.selfsup.0.W", "proj.selfsup.1.W"} <= set(state.params)
    assert not set(state.key_params) & {"cls.W", "cls.b"}
    v = encode(np.ones((2, 16)), state.params)
    assert classify(v, state.params).shape == (2, 3)


@given(st.integers(0, 2**31 - 1), st.floats(1e-3, 1e3))
def test_projection_outputs_unit_norm(seed, scale):
    from contrastlab.model import EncoderConfig

    enc = EncoderConfig(input_dim=16, widths=(12, 8), proj_hidden=8, embed_dim=4)
    state = make_state(enc, "SupCon+SelfSupCon", seed=seed % 1000)
    x = np.random.default_rng(seed).normal(size=(6, 16)) * scale
    v = encode(x, state.params)
    for head in ("selfsup", "supcon"):
        z = project(v, state.params, head).data
        norms = np.linalg.norm(z, axis=1)
        assert np.all((np.abs(norms - 1) < 1e-9) | (norms == 0))


def test_shared_header_rejected_for_joint(tiny_encoder):
    with pytest.raises(ConfigError, match="diverges"):
        ModelConfig(tiny_encoder, 3, "CE+SelfSupCon", shared_header=True).validate()


def test_config_lists_all_violations(tiny_encoder):
    cfg = ModelConfig(tiny_encoder, 1, "CE", temperature=0.0, momentum=1.5, queue_size=0, alpha=-1)
    assert len(cfg.violations()) == 5


# momentum update


def _pair(rng):
    k = {"w": Tensor(rng.normal(size=(3, 2)))}
    q = {"w": Tensor(rng.normal(size=(3, 2)))}
    return k, q


def test_momentum_extremes_exact():
    rng = np.random.default_rng(0)
    k, q = _pair(rng)
    momentum_update(k, q, 0.0)
    np.testing.assert_array_equal(k["w"].data, q["w"].data)
    k, q = _pair(rng)
    before = k["w"].data.copy()
    momentum_update(k, q, 1.0)
    np.testing.assert_array_equal(k["w"].data, before)


def test_momentum_scalar_formula():
    k, q = {"p": Tensor(1.0)}, {"p": Tensor(0.0)}
    momentum_update(k, q, 0.99)
    assert k["p"].data == pytest.approx(0.99, abs=1e-15)


def test_momentum_rejects_bad_coefficient():
    k, q = _pair(np.random.default_rng(1))
    with pytest.raises(ContractError):
        momentum_update(k, q, 1.01)
    with pytest.raises(DimensionError):
        momentum_update(k, {"w": Tensor(np.zeros(3))}, 0.5)


@given(st.integers(0, 2**31 - 1), st.floats(0.01, 0.99))
def test_ema_contraction(seed, m):
    k, q = _pair(np.random.default_rng(seed))
    dists = []
    for _ in range(20):
        dists.append(np.linalg.norm(k["w"].data - q["w"].data))
        momentum_update(k, q, m)
    # exact factor m per step; the tolerance only absorbs rounding once the gap is ~1e-16
    assert np.all(np.diff(dists) <= 1e-14)
    assert dists[1] == pytest.approx(m * dists[0], rel=1e-9)


# key queue


def test_queue_fifo_example():
    rng = np.random.default_rng(0)
    items = unit_rows(rng, 6, 3)
    q = KeyQueue(4, 3)
    q.enqueue(items[0:2])
    assert q.fill == 2
    q.enqueue(items[2:4])
    q.enqueue(items[4:6])
    emb, _ = q.contents()
    np.testing.assert_array_equal(emb, items[2:6])


def test_queue_errors():
    q = KeyQueue(2, 3)
    with pytest.raises(ContractError):
        q.enqueue(np.ones((1, 3)))
    with pytest.raises(ContractError):
        q.enqueue(unit_rows(np.random.default_rng(0), 3, 3))
    with pytest.raises(DimensionError):
        q.enqueue(unit_rows(np.random.default_rng(0), 1, 4))


def test_queue_region_hides_seed_entries():
    q = KeyQueue(5, 3)
    assert q.region()[0].shape == (0, 3)
    q.enqueue(unit_rows(np.random.default_rng(1), 2, 3))
    assert q.region()[0].shape == (2, 3)
    assert q.warmup


def test_labels_stored_only_for_supcon(tiny_encoder):
    state = make_state(tiny_encoder, "SupCon+SelfSupCon")
    assert state.queues["supcon"].labeled and not state.queues["selfsup"].labeled
    keys = unit_rows(np.random.default_rng(2), 2, 4)
    state.queues["supcon"].enqueue(keys, [1, 2])
    state.queues["selfsup"].enqueue(keys, [1, 2])
    assert state.queues["supcon"].contents()[1].tolist() == [1, 2]
    assert state.queues["selfsup"].contents()[1].tolist() == [-1, -1]


@given(
    st.integers(1, 12),
    st.lists(st.integers(0, 12), min_size=1, max_size=40),
    st.integers(0, 2**31 - 1),
)
def test_queue_matches_list_model(capacity, sizes, seed):
    rng = np.random.default_rng(seed)
    q = KeyQueue(capacity, 3, labeled=True)
    model: list[tuple[tuple, int]] = []
    counter = 0
    for b in sizes:
        b = min(b, capacity)
        keys = unit_rows(rng, b, 3)
        labels = np.arange(counter, counter + b)
        counter += b
        q.enqueue(keys, labels)
        model.extend(zip(map(tuple, keys), labels))
        model = model[-capacity:]
        emb, lab = q.contents()
        assert lab.tolist() == [m[1] for m in model]
        np.testing.assert_array_equal(emb, np.array([m[0] for m in model]).reshape(-1, 3))
        assert q.fill == len(model)
        np.testing.assert_allclose(np.linalg.norm(q.embeddings, axis=1), 1.0, atol=1e-12)


# checkpoints


def _batch(state, seed=0, n=6):
    rng = np.random.default_rng(seed)
    images = rng.uniform(size=(n, 16))
    labels = rng.integers(0, 3, size=n)
    return images, labels


def _logits_probe(state, x):
    v = encode(x, state.params)
    outs = [v.data]
    if "cls.W" in state.params:
        outs.append(classify(v, state.params).data)
    for head in state.config.objective.heads:
        outs.append(project(v, state.params, head).data)
        kv = encode(x, state.key_params)
        outs.append(project(kv, state.key_params, head).data)
    return outs


@pytest.mark.parametrize("objective", [o.value for o in Objective])
def test_checkpoint_round_trip_fresh(tmp_path, tiny_encoder, objective):
    state = make_state(tiny_encoder, objective)
    path = save_checkpoint(state, tmp_path / "c.json")
    loaded = load_checkpoint(path)
    x = np.random.default_rng(9).uniform(size=(5, 16))
    for a, b in zip(_logits_probe(state, x), _logits_probe(loaded, x)):
        np.testing.assert_array_equal(a, b)
    for h in state.queues:
        np.testing.assert_array_equal(state.queues[h].embeddings, loaded.queues[h].embeddings)


def test_checkpoint_tampered_shape(tmp_path, tiny_encoder):
    path = save_checkpoint(make_state(tiny_encoder, "CE"), tmp_path / "c.json")
    doc = json.loads(path.read_text())
    doc["params"]["enc.0.W"]["shape"] = [12, 17]
    path.write_text(json.dumps(doc))
    with pytest.raises(CheckpointShapeError):
        load_checkpoint(path)


def test_checkpoint_version_and_truncation(tmp_path, tiny_encoder):
    path = save_checkpoint(make_state(tiny_encoder, "CE"), tmp_path / "c.json")
    text = path.read_text()
    doc = json.loads(text)
    doc["schema_version"] = 99
    (tmp_path / "v.json").write_text(json.dumps(doc))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(tmp_path / "v.json")
    (tmp_path / "t.json").write_text(text[: len(text) // 2])
    with pytest.raises(CheckpointTruncatedError):
        load_checkpoint(tmp_path / "t.json")
    with pytest.raises(MissingArtifactError):
        load_checkpoint(tmp_path / "absent.json")


def test_checkpoint_trajectory_replay(tmp_path, tiny_encoder):
    state = make_state(tiny_encoder, "SupCon+SelfSupCon", queue_size=5)
    images, labels = _batch(state, n=8)
    policy = AugmentationPolicy.strong()
    opt = OptimizerState(lr=0.05)
    rng = RngStream(4, "train")
    for h, q in state.queues.items():
        q.enqueue(unit_rows(np.random.default_rng(3), 3, 4), [0, 1, 2])

    def step(st, o, i):
        idx = np.arange(i % 2 * 4, i % 2 * 4 + 4)
        train_step(st, make_batch(images, labels, idx, st, policy, rng.split("step", i)), o)

    for i in range(3):
        step(state, opt, i)
    path = save_checkpoint(state, tmp_path / "mid.json", optimizer=opt)
    ck = read_checkpoint(path)
    resumed, resumed_opt = ck.state, ck.optimizer
    for i in range(3, 6):
        step(state, opt, i)
        step(resumed, resumed_opt, i)
    for name in state.params:
        np.testing.assert_array_equal(state.params[name].data, resumed.params[name].data)
    for name in state.key_params:
        np.testing.assert_array_equal(state.key_params[name].data, resumed.key_params[name].data)
    for h in state.queues:
        np.testing.assert_array_equal(state.queues[h].embeddings, resumed.queues[h].embeddings)


def test_checkpoint_bytes_deterministic(tmp_path, tiny_encoder):
    a = save_checkpoint(make_state(tiny_encoder, "SupCon", seed=3), tmp_path / "a.json")
    b = save_checkpoint(make_state(tiny_encoder, "SupCon", seed=3), tmp_path / "b.json")
    assert a.read_bytes() == b.read_bytes()


def test_key_encoder_isolated_from_optimizer(tiny_encoder):
    state = make_state(tiny_encoder, "CE+SelfSupCon", queue_size=16)
    state.config = ModelConfig(**{**state.config.__dict__, "momentum": 1.0})
    before = {n: p.data.copy() for n, p in state.key_params.items()}
    images, labels = _batch(state, seed=5, n=8)
    for h, q in state.queues.items():
        q.enqueue(unit_rows(np.random.default_rng(3), 2, 4))
    opt = OptimizerState(lr=0.1)
    for i in range(4):
        batch = make_batch(images, labels, np.arange(8), state, AugmentationPolicy.weak(), RngStream(0, f"s{i}"))
        train_step(state, batch, opt)
    for n, p in state.key_params.items():
        np.testing.assert_array_equal(p.data, before[n])
    assert not np.array_equal(state.params["enc.0.W"].data, before["enc.0.W"])


def test_clone_is_deep(tiny_encoder):
    state = make_state(tiny_encoder, "SelfSupCon")
    c = clone_state(state)
    c.params["enc.0.W"].data += 1
    c.queues["selfsup"].enqueue(unit_rows(np.random.default_rng(0), 1, 4))
    assert not np.array_equal(c.params["enc.0.W"].data, state.params["enc.0.W"].data)
    assert state.queues["selfsup"].fill == 0
