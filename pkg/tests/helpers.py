import numpy as np

# criterion number -> (PASS/FAIL, detail); printed in the terminal summary
ACCEPTANCE: dict[int, tuple[str, str]] = {}
# extra report lines (tables, soft-check notes) printed after the criteria
ACCEPTANCE_NOTES: list[str] = []


def central_difference(f, x, h=1e-5):
    """Numerical gradient of scalar ``f`` at array ``x`` (modified in place, restored)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def max_relative_error(a, b, floor=1e-4):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def random_objective_setup(objective, seed, tau, alpha=None):
    """Tiny model + fixed two-view batch + partly filled queues for gradient checks.

    Batch size is drawn from 1..4 and queue capacity from 1..16.
    """
    from contrastlab.model import EncoderConfig, ModelConfig, init_model
    from contrastlab.numerics import RngStream
    from contrastlab.objectives import AugmentedBatch

    rng = np.random.default_rng(seed)
    k = 3
    b = int(rng.integers(1, 5))
    m = int(rng.integers(1, 17))
    enc = EncoderConfig(input_dim=4, widths=(5, 4), proj_hidden=4, embed_dim=3)
    if alpha is None:
        alpha = float(rng.choice([0.0, 0.5, 1.0, 2.0]))
    cfg = ModelConfig(enc, k, objective, temperature=tau, queue_size=m, alpha=alpha)
    state = init_model(cfg, RngStream(seed, "gradcheck"))
    for p in state.params.values():
        p.data = p.data + 0.1 * rng.normal(size=p.shape)
    for name, p in state.key_params.items():
        p.data = state.params[name].data + 0.05 * rng.normal(size=p.shape)
    for q in state.queues.values():
        fill = int(rng.integers(1, m + 1))
        q.enqueue(unit_rows(rng, fill, 3), rng.integers(0, k, size=fill))
    x = rng.uniform(0, 1, size=(b, 4))
    batch = AugmentedBatch(
        x=x,
        view1=np.clip(x + 0.1 * rng.normal(size=x.shape), 0, 1),
        view2=np.clip(x + 0.1 * rng.normal(size=x.shape), 0, 1),
        labels=rng.integers(0, k, size=b),
    )
    return state, batch


def objective_gradient_error(objective, seed, tau, alpha=None):
    """Max relative error between tape gradients and central differences over all trainable params."""
    from contrastlab.numerics import Tape, backward
    from contrastlab.objectives import compute_objective

    state, batch = random_objective_setup(objective, seed, tau, alpha)
    params = state.trainable()
    with Tape() as tape:
        out = compute_objective(batch, state, enqueue=False)
    backward(out.total, tape, params)

    def value():
        return compute_objective(batch, state, enqueue=False).value

    worst = 0.0
    for p in params:
        worst = max(worst, max_relative_error(p.grad, central_difference(value, p.data)))
    return worst


def gram_cka_oracle(x, y):
    """CKA as a ratio of HSIC estimates on explicit n x n Gram matrices."""
    n = len(x)
    h = np.eye(n) - np.ones((n, n)) / n
    k, l_ = x @ x.T, y @ y.T

    def hsic(a, b):
        return np.trace(a @ h @ b @ h) / (n - 1) ** 2

    return hsic(k, l_) / np.sqrt(hsic(k, k) * hsic(l_, l_))


def separation_oracle(x, y, literal=False):
    """(R_intra, R_inter) by explicit loops over classes and sample pairs."""
    classes = sorted(set(y.tolist()))

    def d(i, j):
        return 1 - x[i] @ x[j] / (np.linalg.norm(x[i]) * np.linalg.norm(x[j]))

    intra = []
    for c in classes:
        idx = [i for i in range(len(y)) if y[i] == c]
        intra.append(sum(d(i, j) for i in idx for j in idx) / len(idx) ** 2)
    inter = 0.0
    for a in classes:
        for b in classes:
            if a == b:
                continue
            ia = [i for i in range(len(y)) if y[i] == a]
            ib = [i for i in range(len(y)) if y[i] == b]
            total = sum(d(i, j) for i in ia for j in ib)
            inter += total / (len(ia) ** 2 if literal else len(ia) * len(ib))
    k = len(classes)
    return float(np.mean(intra)), inter / (k * (k - 1))
