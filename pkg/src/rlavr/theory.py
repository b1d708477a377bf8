"""Numerical verification of the gradient-alignment theory.

For a strict on-policy update the gradient induced by an advantage vector A
is g(A) = (1/G) S A, where the columns of S are the score vectors
(probability gradients) of the sampled answers. The gram matrix K = S^T S
turns the gradient cosine into a transformed advantage cosine, and the
condition number of K restricted to the mean-zero subspace bounds how far
the pseudo-label gradient can rotate away from the ground-truth one as a
function of the advantage gap d = ||A - Ahat||.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .env import PolicySnapshot, policy_probs
from .grpo import compute_advantages

EIG_CLAMP = 1e-12


class DegenerateInstanceError(ValueError):
    """Instance violates the non-degeneracy assumptions (zero gradient or singular K)."""


@dataclass(frozen=True)
class TheoryInstance:
    scores: np.ndarray  # (param_dim, G) columns are per-response score vectors
    adv_true: np.ndarray  # (G,), epsilon=0 advantages of the true rewards
    adv_pseudo: np.ndarray  # (G,)
    gram: np.ndarray  # (G, G) scores^T scores

    @property
    def group_size(self) -> int:
        return len(self.adv_true)


@dataclass(frozen=True)
class LemmaReport:
    cos_grad: float
    cos_transformed: float
    gap: float


@dataclass(frozen=True)
class AlignmentReport:
    cos_grad: float
    cos_transformed: float
    d: float
    kappa: float
    bound: float
    satisfied: bool


def score_vector(policy: PolicySnapshot, features: np.ndarray, answer: int) -> np.ndarray:
    """Flattened gradient of the answer probability over the policy weights."""
    probs = policy_probs(policy, features)
    one_hot = np.zeros(len(probs))
    one_hot[answer] = 1.0
    return (probs[answer] * np.outer(one_hot - probs, features)).ravel()


def build_instance(
    policy: PolicySnapshot,
    features: np.ndarray,
    answers,
    rewards_true,
    rewards_pseudo,
) -> TheoryInstance:
    """Score matrix, gram matrix, and the epsilon-free advantage pair."""
    adv_true = compute_advantages(rewards_true, epsilon=0.0)
    adv_pseudo = compute_advantages(rewards_pseudo, epsilon=0.0)
    if adv_true.degenerate or adv_pseudo.degenerate:
        raise DegenerateInstanceError("reward vectors must be non-degenerate")
    answers = np.asarray(answers, dtype=int)
    s = np.column_stack([score_vector(policy, features, int(a)) for a in answers])
    return TheoryInstance(
        scores=s, adv_true=adv_true.values, adv_pseudo=adv_pseudo.values, gram=s.T @ s
    )


def _cosine(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise DegenerateInstanceError("zero gradient; cosine undefined")
    return float(u @ v / (nu * nv))


def matrix_sqrt_psd(k: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition.

    Eigenvalues are clamped at 1e-12 relative to the largest one: K is PSD by
    construction, so anything below that is eigensolver roundoff.
    """
    eigvals, eigvecs = np.linalg.eigh(k)
    floor = EIG_CLAMP * max(float(eigvals[-1]), 0.0)
    eigvals = np.clip(eigvals, floor, None)
    return (eigvecs * np.sqrt(eigvals)) @ eigvecs.T


def lemma1_check(inst: TheoryInstance, degenerate_floor: float = 1e-2) -> LemmaReport:
    """Compare cos(g, ghat) against the K^{1/2}-transformed advantage cosine.

    The two sides are computed through independent code paths: explicit
    parameter-space gradients versus the gram-matrix square root. A gradient
    whose norm falls below ``degenerate_floor`` times its natural scale
    ||S||_F ||A|| / G has lost too much to cancellation for either cosine to
    be meaningful in float64 and is reported as degenerate.
    """
    g = inst.scores @ inst.adv_true / inst.group_size
    ghat = inst.scores @ inst.adv_pseudo / inst.group_size
    s_norm = np.linalg.norm(inst.scores)
    for vec, adv in ((g, inst.adv_true), (ghat, inst.adv_pseudo)):
        scale = s_norm * np.linalg.norm(adv) / inst.group_size
        if np.linalg.norm(vec) <= degenerate_floor * scale:
            raise DegenerateInstanceError("gradient numerically zero; cosine undefined")
    cos_grad = _cosine(g, ghat)
    root = matrix_sqrt_psd(inst.gram)
    cos_transformed = _cosine(root @ inst.adv_true, root @ inst.adv_pseudo)
    return LemmaReport(
        cos_grad=cos_grad,
        cos_transformed=cos_transformed,
        gap=abs(cos_grad - cos_transformed),
    )


def centered_subspace_basis(g: int) -> np.ndarray:
    """Orthonormal (G, G-1) basis of {v : sum(v) = 0}."""
    m = np.concatenate([np.ones((g, 1)), np.eye(g)[:, : g - 1]], axis=1)
    q, _ = np.linalg.qr(m)
    return q[:, 1:]


def restricted_condition_number(
    k: np.ndarray, tol: float = 1e-12
) -> tuple[float, float, float]:
    """Extreme eigenvalues and condition number of K on the mean-zero subspace."""
    g = k.shape[0]
    basis = centered_subspace_basis(g)
    restricted = basis.T @ k @ basis
    eigvals = np.linalg.eigvalsh(restricted)
    lam_min, lam_max = float(eigvals[0]), float(eigvals[-1])
    if lam_min <= tol:
        raise DegenerateInstanceError(
            f"gram matrix singular on the centered subspace (lambda_min={lam_min:.3e})"
        )
    return lam_max, lam_min, lam_max / lam_min


def alignment_bound(kappa: float, group_size: int, d: float) -> float:
    """Upper bound on cos(g, ghat): 1 - 2 / (4*kappa*G/d^2 - (kappa - 1)).

    Centered advantage pairs with squared norm G satisfy d^2 <= 4G exactly
    (Cauchy-Schwarz); the excess 4G/d^2 - 1 is clamped at zero so roundoff in
    d^2 near the antipodal corner cannot leak through the kappa-scaled term.
    """
    if d <= 0.0:
        raise DegenerateInstanceError("bound undefined at d = 0")
    excess = max(0.0, 4.0 * group_size / d**2 - 1.0)
    return 1.0 - 2.0 / (kappa * excess + 1.0)


def theorem1_check(inst: TheoryInstance, slack: float = 1e-9) -> AlignmentReport:
    """Evaluate the alignment bound on one instance."""
    d = float(np.linalg.norm(inst.adv_true - inst.adv_pseudo))
    if d == 0.0:
        raise DegenerateInstanceError("bound undefined for identical advantage vectors")
    _, _, kappa = restricted_condition_number(inst.gram)
    report = lemma1_check(inst)
    bound = alignment_bound(kappa, inst.group_size, d)
    return AlignmentReport(
        cos_grad=report.cos_grad,
        cos_transformed=report.cos_transformed,
        d=d,
        kappa=kappa,
        bound=bound,
        satisfied=report.cos_grad <= bound + slack,
    )


def make_isotropic_instance(
    rewards_true, rewards_pseudo, param_dim: int, rng_seed
) -> TheoryInstance:
    """Instance with orthonormal score columns, so K = I and kappa = 1."""
    adv_true = compute_advantages(rewards_true, epsilon=0.0)
    adv_pseudo = compute_advantages(rewards_pseudo, epsilon=0.0)
    if adv_true.degenerate or adv_pseudo.degenerate:
        raise DegenerateInstanceError("reward vectors must be non-degenerate")
    g = len(adv_true.values)
    if param_dim < g:
        raise ValueError("param_dim must be at least the group size")
    rng = np.random.default_rng(rng_seed)
    q, _ = np.linalg.qr(rng.normal(size=(param_dim, g)))
    return TheoryInstance(
        scores=q, adv_true=adv_true.values, adv_pseudo=adv_pseudo.values, gram=q.T @ q
    )


def _random_binary_pair(rng, g: int) -> tuple[np.ndarray, np.ndarray]:
    def non_degenerate():
        ones = int(rng.integers(1, g))
        r = np.zeros(g)
        r[rng.permutation(g)[:ones]] = 1.0
        return r
    return non_degenerate(), non_degenerate()


def random_instance(rng: np.random.Generator, require_pd: bool = True) -> TheoryInstance:
    """Random policy/answers/reward instance for fuzzing.

    With ``require_pd`` the G sampled answers are distinct, which makes the
    gram matrix positive definite on the centered subspace for a generic
    policy; the parameter dimension is kept at >= 4G.
    """
    g = int(rng.integers(2, 17))
    n_answers = g + int(rng.integers(0, 5)) if require_pd else int(rng.integers(2, g + 4))
    feature_dim = max(2, int(np.ceil(4 * g / n_answers)) + int(rng.integers(0, 3)))
    weights = rng.normal(size=(n_answers, feature_dim)) * rng.uniform(0.3, 1.2)
    features = rng.normal(size=feature_dim)
    if require_pd:
        answers = rng.permutation(n_answers)[:g]
    else:
        answers = rng.integers(0, n_answers, size=g)
    r_true, r_pseudo = _random_binary_pair(rng, g)
    policy = PolicySnapshot(weights=weights, version=0)
    return build_instance(policy, features, answers, r_true, r_pseudo)


def fuzz_lemma(n_instances: int, rng_seed) -> dict:
    """Max |cos(g,ghat) - transformed cosine| over random instances.

    Instance i is drawn from its own seed stream [rng_seed, i], so any case
    can be regenerated in isolation.
    """
    max_gap = 0.0
    checked = 0
    skipped = 0
    index = 0
    while checked < n_instances:
        rng = np.random.default_rng(np.random.SeedSequence([rng_seed, index]))
        index += 1
        inst = random_instance(rng, require_pd=False)
        try:
            report = lemma1_check(inst)
        except DegenerateInstanceError:
            skipped += 1
            continue
        max_gap = max(max_gap, report.gap)
        checked += 1
    return {"instances": checked, "skipped": skipped, "max_identity_gap": max_gap}


def fuzz_theorem(
    n_instances: int,
    rng_seed,
    slack: float = 1e-9,
    collect_rows: bool = False,
    kappa_limit: float = 1e6,
):
    """Count bound violations over random positive-definite instances.

    Instances whose restricted gram matrix is conditioned worse than
    ``kappa_limit`` are skipped: beyond that the bound cannot be evaluated to
    the requested slack in float64, so they carry no evidence either way.
    Instance i is drawn from its own seed stream [rng_seed, i].
    """
    checked = 0
    skipped = 0
    violations = 0
    max_identity_gap = 0.0
    min_margin = np.inf
    index = 0
    rows: list[dict] = []
    while checked < n_instances:
        rng = np.random.default_rng(np.random.SeedSequence([rng_seed, index]))
        instance_seed = index
        index += 1
        inst = random_instance(rng, require_pd=True)
        try:
            report = theorem1_check(inst, slack=slack)
        except DegenerateInstanceError:
            skipped += 1
            continue
        if report.kappa > kappa_limit:
            skipped += 1
            continue
        checked += 1
        min_margin = min(min_margin, report.bound - report.cos_grad)
        max_identity_gap = max(max_identity_gap, abs(report.cos_grad - report.cos_transformed))
        if not report.satisfied:
            violations += 1
        if collect_rows:
            rows.append(
                {
                    "seed": instance_seed,
                    "G": inst.group_size,
                    "d": report.d,
                    "kappa": report.kappa,
                    "cos_grad": report.cos_grad,
                    "bound": report.bound,
                    "satisfied": report.satisfied,
                }
            )
    summary = {
        "instances": checked,
        "skipped": skipped,
        "violations": violations,
        "max_identity_gap": max_identity_gap,
        "min_margin": float(min_margin),
    }
    return (summary, rows) if collect_rows else (summary, None)
