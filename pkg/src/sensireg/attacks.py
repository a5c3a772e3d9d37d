"""L2 evasion attacks: PGD, Carlini-Wagner variants, and HopSkipJump.

All attacks operate on a single unbatched sample, keep every iterate inside
the input box, and report a recomputed L2 distance plus the number of model
evaluations spent. ``label`` means the true class for untargeted attacks and
the target class when ``targeted=True``. Fixed seeds give bit-identical
outcomes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .nn import Model
from .tensor import Tensor


@dataclass
class AttackOutcome:
    adversarial: np.ndarray
    success: bool
    l2_distance: float
    queries: int
    iterations_used: int


@dataclass(frozen=True)
class AttackConfig:
    """Attack selection plus its knobs; unused fields are ignored per kind."""
    kind: str
    targeted: bool = False
    target_class: int | None = None
    seed: int = 42
    bounds: tuple[float, float] = (0.0, 1.0)
    # carlini-wagner family
    steps: int = 1000
    step_size: float = 0.1
    initial_const: float = 10.0
    binary_search_steps: int = 9
    confidence: float = 0.0
    # pgd
    eps_iter: float = 0.01
    n_iter: int = 1000
    rand_init: bool = True
    # adaptive variants
    n_restarts: int = 400
    init_radius: float = 0.5
    ge_sample_count: int = 10
    ge_eps: float = 0.01
    # hopskipjump
    max_iter: int = 50
    init_grad_queries: int = 100
    init_pool: int = 1000

    KINDS = ("pgd", "cw", "cw_restarts", "cw_grad_expect", "hop_skip_jump")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")


def _l2(delta: np.ndarray) -> float:
    return float(np.linalg.norm(np.asarray(delta, dtype=np.float64).ravel()))


def uniform_in_ball(shape, radius: float, rng: np.random.Generator) -> np.ndarray:
    """Uniform draw from the solid L2 ball (direction times radius * U^(1/d))."""
    if radius == 0.0:
        return np.zeros(shape)
    direction = rng.standard_normal(shape)
    norm = np.linalg.norm(direction.ravel())
    while norm < 1e-12:
        direction = rng.standard_normal(shape)
        norm = np.linalg.norm(direction.ravel())
    r = radius * rng.uniform() ** (1.0 / direction.size)
    return (r / norm) * direction


def _check_input(model: Model, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=model.dtype)
    if x.shape != model.input_shape:
        raise ValueError(f"sample shape {x.shape} does not match model input "
                         f"{model.input_shape}")
    return x


def _goal_met(model: Model, adv: np.ndarray, label: int, targeted: bool) -> bool:
    pred = int(nn.predict_labels(model, adv[None])[0])
    return pred == label if targeted else pred != label


def _finalize(model: Model, x: np.ndarray, adv: np.ndarray, label: int,
              targeted: bool, queries: int, iterations: int) -> AttackOutcome:
    success = _goal_met(model, adv, label, targeted)
    return AttackOutcome(adversarial=adv, success=success,
                         l2_distance=_l2(adv - x), queries=queries + 1,
                         iterations_used=iterations)


# ---------------------------------------------------------------------------
# PGD


def pgd_l2(model: Model, x, label: int, eps: float, step_size: float = 0.01,
           n_iter: int = 1000, rand_init: bool = True, targeted: bool = False,
           seed: int = 0, bounds=(0.0, 1.0)) -> AttackOutcome:
    """Projected gradient steps on cross-entropy inside the eps-ball.

    Each step moves along the L2-normalized loss gradient (ascent, or descent
    toward the target), projects back onto the ball around ``x`` and clips to
    the bounds. Zero gradients produce no movement, so a fully flat loss
    yields a failure outcome rather than an error.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = _check_input(model, x)
    rng = np.random.default_rng(seed)
    labels = np.array([label])

    x_adv = x.copy()
    if rand_init:
        x_adv = np.clip(x + uniform_in_ball(x.shape, eps, rng).astype(x.dtype),
                        bounds[0], bounds[1]).astype(x.dtype)
    queries = 0
    for _ in range(n_iter):
        xt = Tensor(x_adv[None], requires_grad=True)
        logits, _ = nn.forward(model, xt)
        loss = T.softmax_cross_entropy(logits, labels)
        queries += 1
        g = T.backward(loss).get(xt)
        if g is None:
            continue
        g = g[0].astype(np.float64)
        norm = _l2(g)
        if norm < 1e-12:
            continue
        direction = -g / norm if targeted else g / norm
        moved = x_adv.astype(np.float64) + step_size * direction
        delta = moved - x
        dist = _l2(delta)
        if dist > eps:
            delta *= eps / dist
        x_adv = np.clip(x + delta, bounds[0], bounds[1]).astype(x.dtype)
    return _finalize(model, x, x_adv, label, targeted, queries, n_iter)


# ---------------------------------------------------------------------------
# Carlini-Wagner


def _to_tanh_space(x: np.ndarray) -> np.ndarray:
    z = np.clip(2.0 * x.astype(np.float64) - 1.0, -1 + 1e-6, 1 - 1e-6)
    return np.arctanh(z)


def _cw_objective(model: Model, w: Tensor, x_const: Tensor, label: int,
                  targeted: bool, confidence: float, c: float,
                  offsets: list[np.ndarray]):
    """Distance + c * hinge graph; returns (objective, adv values, hinge at center).

    ``offsets`` perturbs the model-term inputs (gradient-expectation variant);
    the hinge used for success tracking is always evaluated at the center.
    """
    x_adv = T.scale(T.add(T.tanh(w), 1.0), 0.5)
    dist = T.square(T.sub(x_adv, x_const)).sum()

    num_classes = model.num_classes
    onehot = np.zeros((1, num_classes), dtype=x_const.dtype)
    onehot[0, label] = 1.0
    mask = Tensor(onehot)
    neg_big = Tensor(onehot * -1e9)

    def hinge(z: Tensor) -> Tensor:
        own = T.mul(z, mask).sum()
        other = T.amax(T.add(z, neg_big), axis=1).sum()
        gap = T.sub(other, own) if targeted else T.sub(own, other)
        return T.relu(T.add(gap, confidence))

    terms = []
    center_hinge = None
    for off in offsets:
        inp = x_adv if off is None else T.add(x_adv, Tensor(off[None].astype(x_const.dtype)))
        z, _ = nn.forward(model, inp)
        h = hinge(z)
        if off is None:
            center_hinge = h
        terms.append(h)
    total_hinge = terms[0]
    for extra in terms[1:]:
        total_hinge = T.add(total_hinge, extra)
    total_hinge = T.scale(total_hinge, 1.0 / len(terms))

    if center_hinge is None:
        with T.no_grad():
            z0, _ = nn.forward(model, Tensor(x_adv.data))
            center_hinge = hinge(z0)

    objective = T.add(dist, T.scale(total_hinge, c))
    return objective, x_adv.data[0], float(center_hinge.item())


def _cw_run(model: Model, x: np.ndarray, label: int, targeted: bool,
            steps: int, step_size: float, c: float, confidence: float,
            w_init: np.ndarray, ge: tuple[int, float, np.random.Generator] | None):
    """One gradient-descent run at fixed trade-off c. Returns best hit + cost."""
    x_const = Tensor(x[None])
    w_val = w_init.copy()
    best = None  # (dist, adv)
    queries = 0
    for _ in range(steps):
        if ge is None:
            offsets = [None]
        else:
            count, radius, rng = ge
            offsets = [uniform_in_ball(x.shape, radius, rng) for _ in range(count)]
        w = Tensor(w_val.astype(model.dtype), requires_grad=True)
        objective, adv, center_hinge = _cw_objective(
            model, w, x_const, label, targeted, confidence, c, offsets)
        queries += len(offsets) + (1 if ge is not None else 0)
        if center_hinge <= 0.0:
            dist = _l2(adv - x)
            if best is None or dist < best[0]:
                best = (dist, adv.copy())
        g = T.backward(objective).get(w)
        if g is None:
            break
        w_val = w_val - step_size * g.astype(np.float64)
    return best, queries, steps


def _cw_search(model: Model, x: np.ndarray, label: int, targeted: bool,
               steps: int, step_size: float, initial_const: float,
               binary_search_steps: int, confidence: float,
               init_delta: np.ndarray | None,
               ge: tuple[int, float, np.random.Generator] | None,
               bounds) -> AttackOutcome:
    x = _check_input(model, x)
    start = x if init_delta is None else np.clip(
        x + init_delta.astype(np.float64), bounds[0], bounds[1])
    w_init = _to_tanh_space(start)[None]

    lo, hi = 0.0, math.inf
    c = initial_const
    best = None
    queries = 0
    iterations = 0
    for _ in range(binary_search_steps):
        hit, q, it = _cw_run(model, x, label, targeted, steps, step_size,
                             c, confidence, w_init, ge)
        queries += q
        iterations += it
        if hit is not None:
            if best is None or hit[0] < best[0]:
                best = hit
            hi = min(hi, c)
        else:
            lo = max(lo, c)
        c = (lo + hi) / 2.0 if math.isfinite(hi) else c * 10.0

    adv = best[1] if best is not None else x.copy()
    return _finalize(model, x, adv.astype(x.dtype), label, targeted,
                     queries, iterations)


def cw_l2(model: Model, x, label: int, targeted: bool = False,
          steps: int = 1000, step_size: float = 0.1, initial_const: float = 10.0,
          binary_search_steps: int = 9, confidence: float = 0.0,
          init_delta: np.ndarray | None = None,
          bounds=(0.0, 1.0)) -> AttackOutcome:
    """Minimal-L2 misclassification via the tanh-box hinge objective.

    Minimizes ||delta||^2 + c * hinge(logits) in tanh space (iterates stay in
    bounds by construction), with the trade-off c found by binary search:
    multiply by 10 while the attack fails, then bisect between the last
    failure and the smallest success. Returns the minimal-distance success
    across all c runs.
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    return _cw_search(model, x, label, targeted, steps, step_size,
                      initial_const, binary_search_steps, confidence,
                      init_delta, None, bounds)


def cw_l2_restarts(model: Model, x, label: int, targeted: bool = False,
                   n_restarts: int = 400, init_radius: float = 0.5,
                   seed: int = 0, steps: int = 1000, step_size: float = 0.1,
                   initial_const: float = 10.0, binary_search_steps: int = 9,
                   confidence: float = 0.0, bounds=(0.0, 1.0)) -> AttackOutcome:
    """Best-of-N restarts, each from a random point inside an L2 ball.

    Restart 0 starts exactly at the input (bit-identical to ``cw_l2``); every
    later restart offsets the start by a uniform in-ball draw seeded from
    (seed, restart index). Queries accumulate across restarts.
    """
    if n_restarts < 1:
        raise ValueError("n_restarts must be at least 1")
    x = _check_input(model, x)
    best: AttackOutcome | None = None
    queries = 0
    iterations = 0
    for restart in range(n_restarts):
        if restart == 0:
            delta = None
        else:
            rng = np.random.default_rng([seed, restart])
            delta = uniform_in_ball(x.shape, init_radius, rng)
        outcome = cw_l2(model, x, label, targeted=targeted, steps=steps,
                        step_size=step_size, initial_const=initial_const,
                        binary_search_steps=binary_search_steps,
                        confidence=confidence, init_delta=delta, bounds=bounds)
        queries += outcome.queries
        iterations += outcome.iterations_used
        if best is None:
            best = outcome
        elif outcome.success and (not best.success
                                  or outcome.l2_distance < best.l2_distance):
            best = outcome
    return AttackOutcome(adversarial=best.adversarial, success=best.success,
                         l2_distance=best.l2_distance, queries=queries,
                         iterations_used=iterations)


def cw_l2_grad_expectation(model: Model, x, label: int, targeted: bool = False,
                           ge_sample_count: int = 10, ge_eps: float = 0.01,
                           seed: int = 0, steps: int = 1000,
                           step_size: float = 0.1, initial_const: float = 10.0,
                           binary_search_steps: int = 9, confidence: float = 0.0,
                           bounds=(0.0, 1.0)) -> AttackOutcome:
    """Carlini-Wagner with the model-term gradient averaged over an L2 ball.

    Every step evaluates the hinge at ``ge_sample_count`` points drawn
    uniformly from the ball of radius ``ge_eps`` around the current iterate
    and descends the mean, which equals averaging the model gradients; the
    distance-term gradient stays exact. On constant-Jacobian (linear) models
    the averaged gradient equals the plain one.
    """
    if ge_sample_count < 1:
        raise ValueError("ge_sample_count must be at least 1")
    if ge_eps <= 0:
        raise ValueError("ge_eps must be positive")
    rng = np.random.default_rng(seed)
    return _cw_search(model, x, label, targeted, steps, step_size,
                      initial_const, binary_search_steps, confidence,
                      None, (ge_sample_count, ge_eps, rng), bounds)


# ---------------------------------------------------------------------------
# HopSkipJump


def decision_oracle_for(model: Model):
    """Label-only batched oracle; exposes nothing but predicted classes."""
    def oracle(points: np.ndarray) -> np.ndarray:
        return nn.predict_labels(model, np.asarray(points, dtype=model.dtype))
    return oracle


def hop_skip_jump(decision_oracle, x, init_adversarial: np.ndarray | None = None,
                  max_iter: int = 50, init_grad_queries: int = 100,
                  targeted: bool = False, target_class: int | None = None,
                  seed: int = 0, bounds=(0.0, 1.0),
                  init_pool: int = 1000) -> AttackOutcome:
    """Decision-boundary walk using only label queries.

    Each round binary-searches the segment to the boundary (tolerance
    1e-4 x segment length), estimates the boundary normal from
    ``init_grad_queries * sqrt(round)`` sign-weighted sphere probes, then
    takes a geometric step (halved until it stays adversarial). The reported
    distance is monotone non-increasing: the best point seen wins. Targeted
    mode flips the success test to "oracle says target_class" and normally
    starts from a supplied target-class exemplar.
    """
    if targeted and target_class is None:
        raise ValueError("targeted mode needs target_class")
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    state = {"queries": 0}

    def query(points: np.ndarray) -> np.ndarray:
        points = np.asarray(points)
        state["queries"] += len(points)
        return np.asarray(decision_oracle(points))

    original_label = int(query(x[None])[0])

    def is_adv(points: np.ndarray) -> np.ndarray:
        labels = query(points)
        return labels == target_class if targeted else labels != original_label

    def fail() -> AttackOutcome:
        return AttackOutcome(adversarial=x.copy(), success=False,
                             l2_distance=0.0, queries=state["queries"],
                             iterations_used=0)

    if targeted and original_label == target_class:
        return AttackOutcome(adversarial=x.copy(), success=True,
                             l2_distance=0.0, queries=state["queries"],
                             iterations_used=0)

    adv = None
    if init_adversarial is not None:
        candidate = np.clip(np.asarray(init_adversarial, dtype=np.float64),
                            bounds[0], bounds[1])
        if is_adv(candidate[None])[0]:
            adv = candidate
    if adv is None:
        chunk = 128
        drawn = 0
        while drawn < init_pool and adv is None:
            k = min(chunk, init_pool - drawn)
            pool = rng.uniform(bounds[0], bounds[1], size=(k,) + x.shape)
            hits = is_adv(pool)
            drawn += k
            if hits.any():
                adv = pool[int(np.argmax(hits))]
    if adv is None:
        return fail()

    dim = x.size
    best = adv.copy()
    best_dist = _l2(adv - x)

    for t in range(1, max_iter + 1):
        # project back to the boundary along [x, adv]
        lo_pt, hi_pt = x, adv
        tol = 1e-4 * _l2(adv - x)
        while _l2(hi_pt - lo_pt) > max(tol, 1e-12):
            mid = 0.5 * (lo_pt + hi_pt)
            if is_adv(mid[None])[0]:
                hi_pt = mid
            else:
                lo_pt = mid
        boundary = hi_pt
        d_b = _l2(boundary - x)
        if d_b < best_dist:
            best, best_dist = boundary.copy(), d_b

        # Monte Carlo normal estimate from sign-weighted sphere probes
        n_probes = max(1, int(init_grad_queries * math.sqrt(t)))
        probe_radius = d_b / math.sqrt(dim)
        dirs = rng.standard_normal((n_probes,) + x.shape)
        norms = np.sqrt((dirs ** 2).reshape(n_probes, -1).sum(axis=1))
        dirs /= norms.reshape((-1,) + (1,) * x.ndim)
        probes = np.clip(boundary + probe_radius * dirs, bounds[0], bounds[1])
        phi = np.where(is_adv(probes), 1.0, -1.0)
        if np.all(phi == 1.0):
            direction = dirs.mean(axis=0)
        elif np.all(phi == -1.0):
            direction = -dirs.mean(axis=0)
        else:
            w = phi - phi.mean()
            direction = (w.reshape((-1,) + (1,) * x.ndim) * dirs).mean(axis=0)
        norm = _l2(direction)
        if norm < 1e-12:
            adv = boundary
            continue
        direction /= norm

        # geometric step search along the estimated normal
        step = d_b / math.sqrt(t)
        candidate = np.clip(boundary + step * direction, bounds[0], bounds[1])
        halvings = 0
        while not is_adv(candidate[None])[0] and halvings < 25:
            step *= 0.5
            halvings += 1
            candidate = np.clip(boundary + step * direction,
                                bounds[0], bounds[1])
        adv = candidate if halvings < 25 else boundary
        dist = _l2(adv - x)
        if dist < best_dist:
            best, best_dist = adv.copy(), dist

    success = bool(is_adv(best[None])[0])
    return AttackOutcome(adversarial=best, success=success,
                         l2_distance=best_dist, queries=state["queries"],
                         iterations_used=max_iter)


# ---------------------------------------------------------------------------
# dispatch


def run_attack(model: Model, x, label: int, cfg: AttackConfig,
               eps: float | None = None, target_class: int | None = None,
               init_adversarial: np.ndarray | None = None,
               seed: int | None = None) -> AttackOutcome:
    """Run the configured attack on one sample.

    ``label`` is always the true class; for targeted configs the target comes
    from ``target_class`` (or the config) and must differ from the label.
    PGD additionally needs the ``eps`` budget.
    """
    seed = cfg.seed if seed is None else seed
    if cfg.targeted:
        target = target_class if target_class is not None else cfg.target_class
        if target is None:
            raise ValueError("targeted attack needs a target class")
        if target == label:
            raise ValueError("target class must differ from the true label")
        attack_label = target
    else:
        attack_label = label

    if cfg.kind == "pgd":
        if eps is None:
            raise ValueError("pgd needs an eps budget")
        return pgd_l2(model, x, attack_label, eps=eps, step_size=cfg.eps_iter,
                      n_iter=cfg.n_iter, rand_init=cfg.rand_init,
                      targeted=cfg.targeted, seed=seed, bounds=cfg.bounds)
    if cfg.kind == "cw":
        return cw_l2(model, x, attack_label, targeted=cfg.targeted,
                     steps=cfg.steps, step_size=cfg.step_size,
                     initial_const=cfg.initial_const,
                     binary_search_steps=cfg.binary_search_steps,
                     confidence=cfg.confidence, bounds=cfg.bounds)
    if cfg.kind == "cw_restarts":
        return cw_l2_restarts(model, x, attack_label, targeted=cfg.targeted,
                              n_restarts=cfg.n_restarts,
                              init_radius=cfg.init_radius, seed=seed,
                              steps=cfg.steps, step_size=cfg.step_size,
                              initial_const=cfg.initial_const,
                              binary_search_steps=cfg.binary_search_steps,
                              confidence=cfg.confidence, bounds=cfg.bounds)
    if cfg.kind == "cw_grad_expect":
        return cw_l2_grad_expectation(
            model, x, attack_label, targeted=cfg.targeted,
            ge_sample_count=cfg.ge_sample_count, ge_eps=cfg.ge_eps, seed=seed,
            steps=cfg.steps, step_size=cfg.step_size,
            initial_const=cfg.initial_const,
            binary_search_steps=cfg.binary_search_steps,
            confidence=cfg.confidence, bounds=cfg.bounds)
    # hop_skip_jump
    oracle = decision_oracle_for(model)
    return hop_skip_jump(oracle, x, init_adversarial=init_adversarial,
                         max_iter=cfg.max_iter,
                         init_grad_queries=cfg.init_grad_queries,
                         targeted=cfg.targeted,
                         target_class=target_class if cfg.targeted else None,
                         seed=seed, bounds=cfg.bounds, init_pool=cfg.init_pool)
