"""Locality-learning probes on Boolean k-pattern targets.

A k-pattern on {+-1}^n depends only on a window of k consecutive bits. Two
hypothesis families are compared, both trained or measured under the hinge
loss max(1 - h*y, 0) with expectations taken exactly over all 2^n inputs:

* fully connected: h(x) = sum_i u_i relu(<w_i, x>), w_i in R^n
* convolutional:   h(x) = sum_j <u_j, relu(W x[j:j+k] + b)>, W in R^{q x k}

The convolutional activation carries a fixed bias b = 1/k - 1. With weights in
{+-1/k} this makes every hidden unit an exact indicator (scaled by 1/k) of one
sign pattern, which is what the bucket construction of ``construct_readout``
needs in order to interpolate the target.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

EXACT_MAX_N = 24
MC_SAMPLES = 2 ** 16


class TheoryConfigError(ValueError):
    pass


class ResourceError(RuntimeError):
    pass


class ConstructionFailed(RuntimeError):
    def __init__(self, missing: list[str]):
        self.missing = missing
        super().__init__(f"no hidden unit has sign pattern {', '.join(missing)}")


# ---------------------------------------------------------------------------
# tasks


def pattern_index(z: np.ndarray) -> np.ndarray:
    """Row index into a truth table for +-1 windows [..., k]; first bit most significant, +1 -> 1."""
    z = np.asarray(z)
    k = z.shape[-1]
    weights = 2 ** np.arange(k - 1, -1, -1)
    return ((z > 0).astype(np.int64) * weights).sum(axis=-1)


def pattern_string(idx: int, k: int) -> str:
    return "".join("+" if (idx >> (k - 1 - b)) & 1 else "-" for b in range(k))


@dataclass(frozen=True)
class KPatternTask:
    n: int
    k: int
    j_star: int
    table: tuple  # g over the 2^k windows, indexed by pattern_index
    kind: str = "parity"

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x)
        if self.k == 0:
            return np.full(x.shape[:-1], float(self.table[0]))
        win = x[..., self.j_star:self.j_star + self.k]
        return np.asarray(self.table, dtype=np.float64)[pattern_index(win)]


def make_kpattern(n: int, k: int, j_star: int = 0, seed: int | None = None,
                  kind: str = "parity") -> KPatternTask:
    """Parity of the window (``kind="parity"``) or a random +-1 table drawn from ``seed``.

    ``k = 0`` gives the constant target +1 (the empty product).
    """
    if not (0 <= k <= n) or n < 1:
        raise TheoryConfigError(f"need 0 <= k <= n and n >= 1, got n={n}, k={k}")
    if j_star < 0 or j_star + k > n:
        raise TheoryConfigError(f"window start {j_star} with width {k} leaves 0..{n - 1}")
    rows = np.array([[1 if (i >> (k - 1 - b)) & 1 else -1 for b in range(k)] for i in range(2 ** k)])
    if kind == "parity":
        table = rows.prod(axis=1) if k else np.ones(1)
    elif kind == "random":
        table = np.random.default_rng(seed).choice([-1.0, 1.0], size=2 ** k)
    else:
        raise TheoryConfigError(f"unknown pattern kind {kind!r}")
    return KPatternTask(n, k, j_star, tuple(float(v) for v in table), kind)


def all_inputs(n: int) -> np.ndarray:
    """Every x in {+-1}^n as rows of a [2^n, n] float64 array."""
    if n > EXACT_MAX_N:
        raise ResourceError(f"exact enumeration of 2^{n} inputs exceeds the 2^{EXACT_MAX_N} limit")
    codes = np.arange(2 ** n, dtype=np.int64)[:, None]
    bits = (codes >> np.arange(n - 1, -1, -1)) & 1
    return (2.0 * bits - 1.0)


def _inputs(n, rng, exact):
    if exact is None:
        exact = n <= 16
    if exact:
        return all_inputs(n), True
    return rng.choice([-1.0, 1.0], size=(MC_SAMPLES, n)), False


# ---------------------------------------------------------------------------
# fully connected family


def fcsa_bound(n: int, k: int, q: int) -> float:
    """q*n*min(1/C(n-1,k), 1/C(n-1,k-1))."""
    cands = [math.comb(n - 1, k)]
    if k >= 1:
        cands.append(math.comb(n - 1, k - 1))
    return q * n / max(cands)


def hinge(h, y):
    return np.maximum(1.0 - h * y, 0.0)


def fcsa_forward(x: np.ndarray, w: np.ndarray, u: np.ndarray, bias: float = 0.0):
    pre = x @ w.T + bias
    return np.maximum(pre, 0.0) @ u, pre


def fcsa_gradient(task: KPatternTask, w: np.ndarray, u: np.ndarray, x: np.ndarray, bias: float = 0.0):
    """Hinge loss over the rows of ``x`` and its gradients w.r.t. ``w`` [q,n] and ``u`` [q]."""
    y = task(x)
    h, pre = fcsa_forward(x, w, u, bias)
    active = (1.0 - h * y) > 0
    dh = np.where(active, -y, 0.0) / len(x)
    on = (pre > 0).astype(np.float64)
    gu = np.maximum(pre, 0.0).T @ dh
    gw = ((on * dh[:, None]) * u[None, :]).T @ x
    return float(hinge(h, y).mean()), gw, gu


@dataclass
class GradNormStats:
    n: int
    k: int
    q: int
    sq_norms: list
    bound: float
    exact: bool

    @property
    def median(self) -> float:
        return float(np.median(self.sq_norms))

    @property
    def mean(self) -> float:
        return float(np.mean(self.sq_norms))

    @property
    def stderr(self) -> float:
        # enumeration has no estimator noise; Monte Carlo reports the spread across trials
        return 0.0 if self.exact else float(np.std(self.sq_norms) / math.sqrt(len(self.sq_norms)))


def fcsa_init_gradnorm(task: KPatternTask, q: int, trials: int, seed: int = 0,
                       exact: bool | None = None) -> GradNormStats:
    """Squared Frobenius norm of the initial loss gradient w.r.t. the first layer.

    Weights are i.i.d. N(0, 1/n), a permutation-invariant law. The readout is
    u_i = s_i / (q * ||w_i||_1) with random signs s_i, so |u_i| <= 1 and
    |h(x)| <= 1 on every input (hence the hinge never saturates).
    """
    if exact and task.n > EXACT_MAX_N:
        raise ResourceError(f"exact enumeration requested for n={task.n} > {EXACT_MAX_N}")
    rng = np.random.default_rng(seed)
    x, is_exact = _inputs(task.n, rng, exact)
    norms = []
    for _ in range(trials):
        w = rng.normal(size=(q, task.n)) / math.sqrt(task.n)
        u = rng.choice([-1.0, 1.0], size=q) / (q * np.abs(w).sum(axis=1))
        _, gw, _ = fcsa_gradient(task, w, u, x)
        norms.append(float((gw ** 2).sum()))
    return GradNormStats(task.n, task.k, q, norms, fcsa_bound(task.n, task.k, q), is_exact)


# ---------------------------------------------------------------------------
# convolutional family


def conv_bias(k: int) -> float:
    return 1.0 / k - 1.0


def windows(x: np.ndarray, k: int) -> np.ndarray:
    """[N, n] -> [N, n-k+1, k] sliding windows."""
    return np.lib.stride_tricks.sliding_window_view(x, k, axis=-1)


def init_pm_one_over_k(q: int, k: int, rng: np.random.Generator) -> np.ndarray:
    return rng.choice([-1.0, 1.0], size=(q, k)) / k


def conv_forward(xw: np.ndarray, w: np.ndarray, u: np.ndarray, bias: float):
    """``xw`` [N,J,k], ``w`` [q,k], ``u`` [J,q] -> h [N] and pre-activations [N,J,q]."""
    pre = xw @ w.T + bias
    return np.einsum("njq,jq->n", np.maximum(pre, 0.0), u), pre


def width_gate(k: int, delta: float = 0.1) -> float:
    """Hidden width above which every sign bucket is well populated w.p. 1 - delta."""
    return 2 ** (k + 3) * math.log(2 ** k / delta)


def gd_loss_bound(eta: float, steps: int, n: int, k: int, q: int) -> float:
    return (eta ** 2 * steps ** 2 * n * k ** 2.5 * 2 ** (k + 1)
            + k ** 2 * 2 ** (2 * k + 1) / (q * eta * steps)
            + eta * n * q * k)


@dataclass
class LearnRun:
    family: str
    n: int
    k: int
    q: int
    eta: float
    steps: int
    losses: list
    rhs: float
    gate: float

    @property
    def final_loss(self) -> float:
        return self.losses[-1]

    @property
    def avg_loss(self) -> float:
        # average over the S iterates after each update
        return float(np.mean(self.losses[1:])) if len(self.losses) > 1 else self.losses[0]

    @property
    def bound_informative(self) -> bool:
        return self.rhs < 1.0


def _finish(losses, steps):
    # zero hinge loss means a zero gradient, so every later step is a no-op
    losses.extend([0.0] * (steps + 1 - len(losses)))
    return losses


def stcsa_learn(task: KPatternTask, q: int, eta: float, steps: int, seed: int = 0,
                init: tuple[np.ndarray, np.ndarray] | None = None) -> LearnRun:
    """Full-gradient descent on the convolutional hypothesis; losses[s] is the loss after s steps.

    ``init`` overrides the starting (W [q,k], u [n-k+1,q]); by default W has
    +-1/k entries drawn from ``seed`` and u is zero.

    A window takes only 2^k values, so activations are computed once per sign
    pattern and gathered per (input, window) through the pattern index.
    """
    rng = np.random.default_rng(seed)
    x = all_inputs(task.n)
    y = task(x)
    k = task.k
    idx = pattern_index(windows(x, k))  # [N, J]
    n_in, n_win = idx.shape
    z = all_inputs(k)  # row r has pattern_index r
    flat = idx + (2 ** k) * np.arange(n_win)[None, :]
    if init is None:
        w = init_pm_one_over_k(q, k, rng)
        u = np.zeros((n_win, q))
    else:
        w, u = (np.array(a, dtype=np.float64) for a in init)
        if w.shape != (q, k) or u.shape != (n_win, q):
            raise TheoryConfigError(f"init shapes {w.shape}, {u.shape} do not match q={q}, k={k}, windows={n_win}")
    b = conv_bias(k)
    losses = []
    for s in range(steps + 1):
        pre = z @ w.T + b  # [2^k, q]
        act = np.maximum(pre, 0.0)
        per = u @ act.T  # [J, 2^k]
        h = per.reshape(-1)[flat].sum(axis=1)
        loss = float(hinge(h, y).mean())
        losses.append(loss)
        if s == steps or loss == 0.0:
            break
        dh = np.where(1.0 - h * y > 0, -y, 0.0) / n_in
        c = np.bincount(flat.reshape(-1), weights=np.repeat(dh, n_win),
                        minlength=n_win * 2 ** k).reshape(n_win, 2 ** k)
        gu = c @ act
        gpre = (c.T @ u) * (pre > 0)  # [2^k, q]
        gw = gpre.T @ z
        u -= eta * gu
        w -= eta * gw
    return LearnRun("stcsa", task.n, task.k, q, eta, steps, _finish(losses, steps),
                    gd_loss_bound(eta, steps, task.n, task.k, q), width_gate(task.k))


def fcsa_learn(task: KPatternTask, q: int, eta: float, steps: int, seed: int = 0) -> LearnRun:
    """Same budget on the fully connected family, N(0, 1/n) first layer, zero readout."""
    rng = np.random.default_rng(seed)
    x = all_inputs(task.n)
    w = rng.normal(size=(q, task.n)) / math.sqrt(task.n)
    u = np.zeros(q)
    losses = []
    for s in range(steps + 1):
        loss, gw, gu = fcsa_gradient(task, w, u, x)
        losses.append(loss)
        if s == steps or loss == 0.0:
            break
        u -= eta * gu
        w -= eta * gw
    return LearnRun("fcsa", task.n, task.k, q, eta, steps, _finish(losses, steps),
                    gd_loss_bound(eta, steps, task.n, task.k, q), width_gate(task.k))


# ---------------------------------------------------------------------------
# interpolating readout


@dataclass
class Readout:
    u: np.ndarray  # [n-k+1, q]; only the target window's row is nonzero
    residual: float
    norm: float
    bound: float
    bucket_sizes: np.ndarray


def readout_norm_bound(k: int, q: int) -> float:
    return 2 ** (k + 1) * k / math.sqrt(q)


def construct_readout(w: np.ndarray, task: KPatternTask) -> Readout:
    """Readout that makes the convolutional hypothesis equal ``task`` on every input.

    Units are grouped by the sign pattern of their weights; each unit in the
    group for pattern z gets weight k*g(z)/|group|. Raises ``ConstructionFailed``
    if some pattern has no unit.
    """
    q, k = w.shape
    if k != task.k:
        raise TheoryConfigError(f"weights have width {k}, task has k={task.k}")
    if task.n > 16:
        raise ResourceError(f"exhaustive residual check limited to n <= 16, got {task.n}")
    idx = pattern_index(np.sign(w))
    sizes = np.bincount(idx, minlength=2 ** k)
    missing = [pattern_string(i, k) for i in np.flatnonzero(sizes == 0)]
    if missing:
        raise ConstructionFailed(missing)
    table = np.asarray(task.table)
    x = all_inputs(task.n)
    u = np.zeros((task.n - k + 1, q))
    u[task.j_star] = k * table[idx] / sizes[idx]
    h, _ = conv_forward(windows(x, k), w, u, conv_bias(k))
    residual = float(np.abs(h - task(x)).max())
    return Readout(u, residual, float(np.linalg.norm(u)), readout_norm_bound(k, q), sizes)


# ---------------------------------------------------------------------------
# sweeps


@dataclass
class TheoryGrid:
    n: list = field(default_factory=lambda: [8, 12, 16])
    k: list = field(default_factory=lambda: [2, 4, 6])
    q: list = field(default_factory=lambda: [8, 32])
    trials: int = 32
    seed: int = 0
    learn_n: int = 12
    learn_k: int = 3
    learn_q: int = 256
    etas: list = field(default_factory=lambda: [1e-3, 1e-2, 1e-1])
    steps: int = 5000
    families: list = field(default_factory=lambda: ["stcsa", "fcsa"])
    readout_n: list = field(default_factory=lambda: [8, 12])
    readout_k: list = field(default_factory=lambda: [1, 2, 3, 4])
    readout_q: list = field(default_factory=lambda: [64, 256])
    readout_seeds: int = 5

    def validate(self):
        for name in ("n", "k", "q", "etas", "families", "readout_n", "readout_k", "readout_q"):
            if not isinstance(getattr(self, name), list):
                raise TheoryConfigError(f"{name} must be a list")
        if self.trials < 1 or self.steps < 0 or self.readout_seeds < 0:
            raise TheoryConfigError("trials must be >= 1, steps and readout_seeds >= 0")
        if min(self.n + self.q + self.readout_n + self.readout_q + [self.learn_n, self.learn_q]) < 1:
            raise TheoryConfigError("input sizes n and widths q must be >= 1")
        if min(self.k + self.readout_k + [self.learn_k]) < 0 or min(self.etas, default=1.0) <= 0:
            raise TheoryConfigError("pattern lengths k must be >= 0 and step sizes positive")
        bad = set(self.families) - {"stcsa", "fcsa"}
        if bad:
            raise TheoryConfigError(f"unknown families {sorted(bad)}")
        return self


GRADNORM_HEADER = ("n", "k", "q", "trial", "sq_norm", "bound")
LEARN_HEADER = ("family", "n", "k", "q", "eta", "S", "step", "loss")
READOUT_HEADER = ("n", "k", "q", "seed", "residual", "u_norm", "bound")
LEARNERS = {"stcsa": stcsa_learn, "fcsa": fcsa_learn}


def _cell_seed(seed, *cell):
    return int(np.random.SeedSequence([seed, *cell]).generate_state(1)[0])


def _writer(path, header):
    fh = open(path, "w", newline="")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(header)
    return fh, w


def gradnorm_cells(grid: TheoryGrid):
    for n in grid.n:
        for k in grid.k:
            if k > n:
                continue
            for q in grid.q:
                task = make_kpattern(n, k, j_star=(n - k) // 2)
                yield fcsa_init_gradnorm(task, q, grid.trials, _cell_seed(grid.seed, n, k, q))


def learn_runs(grid: TheoryGrid):
    task = make_kpattern(grid.learn_n, grid.learn_k, j_star=(grid.learn_n - grid.learn_k) // 2)
    for fam in grid.families:
        for i, eta in enumerate(grid.etas):
            yield LEARNERS[fam](task, grid.learn_q, eta, grid.steps, _cell_seed(grid.seed, 7, i))


def readout_rows(grid: TheoryGrid):
    """(n, k, q, seed, Readout or None); None marks a construction that found an empty bucket."""
    for n in grid.readout_n:
        for k in grid.readout_k:
            if k > n:
                continue
            task = make_kpattern(n, k, j_star=(n - k) // 2, seed=grid.seed, kind="random")
            for q in grid.readout_q:
                for s in range(grid.readout_seeds):
                    w = init_pm_one_over_k(q, k, np.random.default_rng(_cell_seed(grid.seed, n, k, q, s)))
                    try:
                        yield n, k, q, s, construct_readout(w, task)
                    except ConstructionFailed:
                        yield n, k, q, s, None


def _fmt(v: float) -> str:
    return repr(float(v))


def sweep_and_report(out_dir, grid: TheoryGrid, parts=("gradnorm", "learn", "readout")) -> dict:
    """Write gradnorm.csv, learn.csv and readout.csv under ``out_dir``; returns the results."""
    grid.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    res: dict = {}
    if "gradnorm" in parts:
        fh, w = _writer(out / "gradnorm.csv", GRADNORM_HEADER)
        with fh:
            res["gradnorm"] = []
            for st in gradnorm_cells(grid):
                res["gradnorm"].append(st)
                for t, v in enumerate(st.sq_norms):
                    w.writerow((st.n, st.k, st.q, t, _fmt(v), _fmt(st.bound)))
    if "learn" in parts:
        fh, w = _writer(out / "learn.csv", LEARN_HEADER)
        with fh:
            res["learn"] = []
            for run in learn_runs(grid):
                res["learn"].append(run)
                for s, loss in enumerate(run.losses):
                    w.writerow((run.family, run.n, run.k, run.q, run.eta, run.steps, s, _fmt(loss)))
    if "readout" in parts:
        fh, w = _writer(out / "readout.csv", READOUT_HEADER)
        with fh:
            res["readout"] = []
            for n, k, q, s, us in readout_rows(grid):
                res["readout"].append((n, k, q, s, us))
                if us is None:
                    w.writerow((n, k, q, s, "failed", "", _fmt(readout_norm_bound(k, q))))
                else:
                    w.writerow((n, k, q, s, _fmt(us.residual), _fmt(us.norm), _fmt(us.bound)))
    return res
