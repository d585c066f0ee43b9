"""Exact entropy and mutual-information oracle for small sequence models.

A :class:`DiscreteSequenceModel` draws a latent ``z`` from ``prior``, then a
token sequence from an order-1 Markov chain whose initial distribution and
transition matrix depend on ``z``.  ``z`` plays the role of the visual state:
every quantity here (prefix entropy, I(x_t; z), I(x_t; x_<t | z), the visual
share of information and its boosted form) is computed exactly by enumerating
the joint distribution, so inequalities about them can be checked to
floating-point precision.
"""

from __future__ import annotations

import configparser
import io
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

ENUM_BUDGET = 10**7
NORM_TOL = 1e-12
DEGENERATE_TOL = 1e-12


class CapacityError(RuntimeError):
    """Enumeration would exceed the joint-table budget."""


class ModelFormatError(ValueError):
    pass


@dataclass
class DiscreteSequenceModel:
    prior: np.ndarray  # (Z,)
    initial: np.ndarray  # (Z, V)
    transition: np.ndarray  # (Z, V, V), rows sum to 1
    horizon: int = 8
    name: str = ""

    def __post_init__(self):
        self.prior = np.asarray(self.prior, dtype=np.float64)
        self.initial = np.asarray(self.initial, dtype=np.float64)
        self.transition = np.asarray(self.transition, dtype=np.float64)
        if self.prior.ndim != 1 or self.prior.size < 1:
            raise ModelFormatError("prior must be a non-empty vector")
        Z = self.prior.size
        if self.initial.ndim != 2 or self.initial.shape[0] != Z:
            raise ModelFormatError(f"initial must have shape ({Z}, V)")
        V = self.initial.shape[1]
        if V < 2:
            raise ModelFormatError("vocab_size must be >= 2")
        if self.transition.shape != (Z, V, V):
            raise ModelFormatError(f"transition must have shape ({Z}, {V}, {V})")
        if self.horizon < 1:
            raise ModelFormatError("horizon must be >= 1")
        for label, arr in (("prior", self.prior), ("initial", self.initial), ("transition", self.transition)):
            if np.any(arr < 0) or not np.all(np.isfinite(arr)):
                raise ModelFormatError(f"{label} has negative or non-finite entries")
            if np.any(np.abs(arr.sum(axis=-1) - 1.0) > NORM_TOL):
                raise ModelFormatError(f"{label} rows do not sum to 1")

    @property
    def latent_size(self) -> int:
        return self.prior.size

    @property
    def vocab_size(self) -> int:
        return self.initial.shape[1]


@dataclass
class JointTable:
    """``tables[k]`` holds p(z, x_1..x_k) with shape (Z, V, ..., V), k = 0..T."""

    tables: list[np.ndarray]

    @property
    def horizon(self) -> int:
        return len(self.tables) - 1

    def text_marginal(self, k: int) -> np.ndarray:
        return self.tables[k].sum(axis=0)


def enumerate_joint(model: DiscreteSequenceModel, t: int | None = None) -> JointTable:
    t = model.horizon if t is None else t
    Z, V = model.latent_size, model.vocab_size
    if t < 1:
        raise ValueError("length must be >= 1")
    if Z * V**t > ENUM_BUDGET:
        raise CapacityError(f"|Z|*|V|^t = {Z * V**t} exceeds budget {ENUM_BUDGET}")
    tables = [model.prior.copy(), model.prior[:, None] * model.initial]
    for k in range(1, t):
        trans = model.transition.reshape((Z,) + (1,) * (k - 1) + (V, V))
        tables.append(tables[-1][..., None] * trans)
    return JointTable(tables)


def _h(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def entropy(dist) -> float:
    """Shannon entropy in nats of a probability vector (0 ln 0 = 0)."""
    p = np.asarray(dist, dtype=np.float64).reshape(-1)
    if np.any(p < 0):
        raise ValueError("probabilities must be non-negative")
    if abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"probabilities sum to {p.sum()!r}, not 1")
    return _h(p)


def mutual_information(joint) -> float:
    """I(A;B) = H(A) + H(B) - H(A,B) for a 2-D joint table p(a, b)."""
    j = np.asarray(joint, dtype=np.float64)
    if j.ndim != 2:
        raise ValueError("joint must be 2-D")
    if np.any(j < 0) or abs(j.sum() - 1.0) > 1e-9:
        raise ValueError("joint is not a probability table")
    return _h(j.sum(axis=1)) + _h(j.sum(axis=0)) - _h(j.reshape(-1))


def conditional_entropy_next(text_joint: np.ndarray) -> float:
    """H(x_k | x_<k) from p(x_1..x_k), via sum over prefixes of p(prefix) H(next | prefix)."""
    V = text_joint.shape[-1]
    rows = text_joint.reshape(-1, V)
    pre = rows.sum(axis=1, keepdims=True)
    nz = rows > 0
    ratio = np.divide(rows, pre, out=np.ones_like(rows), where=nz)
    return float(-(rows[nz] * np.log(ratio[nz])).sum())


def conditional_mi(joint_zpx: np.ndarray) -> float:
    """I(X; P | Z) for a table indexed (z, p, x), summed directly from its definition."""
    pz = joint_zpx.sum(axis=(1, 2), keepdims=True)
    pzp = joint_zpx.sum(axis=2, keepdims=True)
    pzx = joint_zpx.sum(axis=1, keepdims=True)
    nz = joint_zpx > 0
    num = joint_zpx * pz
    den = pzp * pzx
    return float((joint_zpx[nz] * np.log(num[nz] / den[nz])).sum())


# ---------------------------------------------------------------------------
# curves
# ---------------------------------------------------------------------------


@dataclass
class PrefixEntropy:
    H_prefix: np.ndarray  # H(x_<t), t = 1..T
    H_step: np.ndarray  # H(x_t | x_<t), t = 1..T
    delta_H: float  # min_t H_step
    nondegenerate: bool
    chain_rule_err: float  # max_t |H(x_<t) - sum_{k<t} H_step[k]|


def prefix_entropy_curve(model: DiscreteSequenceModel, T: int | None = None,
                         joint: JointTable | None = None) -> PrefixEntropy:
    T = model.horizon if T is None else T
    joint = joint or enumerate_joint(model, T)
    H_prefix = np.array([_h(joint.text_marginal(t - 1).reshape(-1)) if t > 1 else 0.0
                         for t in range(1, T + 1)])
    H_step = np.array([conditional_entropy_next(joint.text_marginal(t)) for t in range(1, T + 1)])
    cum = np.concatenate([[0.0], np.cumsum(H_step)[:-1]])
    delta = float(H_step.min())
    return PrefixEntropy(
        H_prefix=H_prefix,
        H_step=H_step,
        delta_H=delta,
        nondegenerate=delta > DEGENERATE_TOL,
        chain_rule_err=float(np.max(np.abs(H_prefix - cum))),
    )


def _position_tables(joint: JointTable, t: int) -> tuple[np.ndarray, np.ndarray]:
    """(p(z, x_t), p(z, x_<t, x_t) flattened to (Z, V^(t-1), V))."""
    J = joint.tables[t]
    Z, V = J.shape[0], J.shape[-1]
    flat = J.reshape(Z, -1, V)
    return flat.sum(axis=1), flat


def visual_mi_curve(model: DiscreteSequenceModel, T: int | None = None,
                    joint: JointTable | None = None) -> np.ndarray:
    """I(x_t; z) for t = 1..T."""
    T = model.horizon if T is None else T
    joint = joint or enumerate_joint(model, T)
    return np.array([mutual_information(_position_tables(joint, t)[0]) for t in range(1, T + 1)])


def text_mi_curves(joint: JointTable, T: int) -> tuple[np.ndarray, np.ndarray]:
    """(I(x_t; x_<t | z), I(x_t; z, x_<t)) for t = 1..T."""
    cond, total = [], []
    for t in range(1, T + 1):
        _, flat = _position_tables(joint, t)
        cond.append(conditional_mi(flat))
        total.append(mutual_information(flat.reshape(-1, flat.shape[-1])))
    return np.array(cond), np.array(total)


def ratio_from_terms(I_vis: np.ndarray, I_cond: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Visual share I_vis / (I_vis + I_cond), clipped to [0, 1].

    Returns (ratio, flagged) where ``flagged`` marks positions at which both
    terms are ~0 and the share is undefined (reported as 0).
    """
    I_vis = np.maximum(np.asarray(I_vis, dtype=np.float64), 0.0)
    I_cond = np.maximum(np.asarray(I_cond, dtype=np.float64), 0.0)
    denom = I_vis + I_cond
    ok = denom > 1e-12
    ratio = np.where(ok, I_vis / np.where(ok, denom, 1.0), np.where(I_vis > 0, 1.0, 0.0))
    flagged = ~ok & ~(I_vis > 0)
    return np.clip(ratio, 0.0, 1.0), flagged


def envelope(t, delta_H: float, C: float, epsilon: float) -> np.ndarray:
    """C / (t*delta_H - epsilon - C) where the denominator is positive, else NaN."""
    t = np.asarray(t, dtype=np.float64)
    den = t * delta_H - epsilon - C
    return np.where(den > 0, C / np.where(den > 0, den, 1.0), np.nan)


@dataclass
class InfoCurve:
    t: np.ndarray
    H_prefix: np.ndarray
    H_step: np.ndarray
    I_vis: np.ndarray
    I_cond: np.ndarray
    I_total: np.ndarray
    ratio: np.ndarray
    ratio_flagged: np.ndarray
    lambdas: np.ndarray
    rho: np.ndarray
    bound: np.ndarray
    delta_H: float
    C: float
    epsilon: float
    nondegenerate: bool
    entropy_chain_err: float
    mi_chain_err: float
    name: str = ""
    meta: dict = field(default_factory=dict)

    COLUMNS = ("t", "H_prefix", "H_step", "I_vis", "I_cond", "ratio", "rho", "bound")

    def rows(self):
        for i in range(self.t.size):
            yield (int(self.t[i]),) + tuple(float(getattr(self, c)[i]) for c in self.COLUMNS[1:])


def alignment_ratio_curve(model: DiscreteSequenceModel, T: int | None = None, epsilon: float = 0.01,
                          lambdas=None) -> InfoCurve:
    """All per-position information quantities of ``model`` up to ``T``.

    ``lambdas`` is the per-position boost used for ``rho``; by default
    ``t / T``.
    """
    T = model.horizon if T is None else T
    joint = enumerate_joint(model, T)
    pe = prefix_entropy_curve(model, T, joint)
    I_vis = visual_mi_curve(model, T, joint)
    I_cond, I_total = text_mi_curves(joint, T)
    ratio, flagged = ratio_from_terms(I_vis, I_cond)
    t = np.arange(1, T + 1)
    lam = t / T if lambdas is None else np.asarray(lambdas, dtype=np.float64)
    if lam.shape != (T,):
        raise ValueError(f"need {T} lambda values")
    rho = np.array([
        rho_vista(max(iv, 0.0), max(ic, 0.0), lv) if not f else math.nan
        for iv, ic, lv, f in zip(I_vis, I_cond, lam, flagged)
    ])
    C = math.log(model.vocab_size)
    return InfoCurve(
        t=t,
        H_prefix=pe.H_prefix,
        H_step=pe.H_step,
        I_vis=I_vis,
        I_cond=I_cond,
        I_total=I_total,
        ratio=ratio,
        ratio_flagged=flagged,
        lambdas=lam,
        rho=rho,
        bound=envelope(t, pe.delta_H, C, epsilon),
        delta_H=pe.delta_H,
        C=C,
        epsilon=epsilon,
        nondegenerate=pe.nondegenerate,
        entropy_chain_err=pe.chain_rule_err,
        mi_chain_err=float(np.max(np.abs(I_total - (I_vis + I_cond)))),
        name=model.name,
    )


# ---------------------------------------------------------------------------
# boosted visual share
# ---------------------------------------------------------------------------


def rho_vista(I_vis: float, I_cond: float, lam: float) -> float:
    """Visual share after scaling the visual term by (1 + lam)."""
    if I_vis < 0 or I_cond < 0 or lam < 0:
        raise ValueError("I_vis, I_cond and lam must be non-negative")
    if I_vis == 0 and I_cond == 0:
        raise ValueError("share undefined when both information terms are zero")
    boosted = (1.0 + lam) * I_vis
    return boosted / (boosted + I_cond)


class RhoBound(NamedTuple):
    rho: float
    bound: float
    holds: bool


def rho_lower_bound_check(I_vis: float, I_cond: float, f_t: float, tol: float = 1e-12) -> RhoBound:
    """rho(lam=f_t) against the lower bound 1 / (1 + I_cond / (f_t * I_vis))."""
    if f_t <= 0 or I_vis <= 0:
        raise ValueError("f_t and I_vis must be positive")
    rho = rho_vista(I_vis, I_cond, f_t)
    bound = 1.0 / (1.0 + I_cond / (f_t * I_vis))
    return RhoBound(rho, bound, rho >= bound - tol)


def lambda_from_rho(rho_target: float, I_vis: float, I_cond: float) -> float:
    """Boost needed to reach ``rho_target``.

    A negative value means the unboosted share already exceeds the target.
    """
    if not 0.0 < rho_target < 1.0:
        raise ValueError("rho_target must lie in (0, 1)")
    if I_vis <= 0:
        raise ValueError("I_vis must be positive")
    return I_cond / ((1.0 / rho_target - 1.0) * I_vis) - 1.0


# ---------------------------------------------------------------------------
# model families
# ---------------------------------------------------------------------------


def random_model(rng: np.random.Generator, latent_size: int, vocab_size: int, horizon: int,
                 concentration: float = 1.0, name: str = "random") -> DiscreteSequenceModel:
    """Dirichlet-distributed tables; entries are a.s. positive, so the model is non-degenerate."""
    a = np.full(vocab_size, concentration)
    prior = rng.dirichlet(np.full(latent_size, concentration))
    initial = rng.dirichlet(a, size=latent_size)
    trans = rng.dirichlet(a, size=(latent_size, vocab_size))
    return DiscreteSequenceModel(prior, initial, trans, horizon, name)


def _iid_uniform() -> DiscreteSequenceModel:
    V = 4
    u = np.full(V, 1.0 / V)
    return DiscreteSequenceModel(np.ones(1), u[None], np.tile(u, (1, V, 1)), 8, "iid-uniform")


def _strong_memory() -> DiscreteSequenceModel:
    # z picks the starting half of the vocabulary; the chain then mostly
    # repeats itself with the same z-independent dynamics.
    V, stay = 4, 0.85
    initial = np.array([[0.5, 0.5, 0.0, 0.0], [0.0, 0.0, 0.5, 0.5]])
    trans = np.full((V, V), (1.0 - stay) / (V - 1))
    np.fill_diagonal(trans, stay)
    return DiscreteSequenceModel(np.array([0.5, 0.5]), initial, np.stack([trans, trans]), 8,
                                 "strong-memory")


def _copy_channel() -> DiscreteSequenceModel:
    # x_1 = z exactly; later tokens are iid given z
    initial = np.eye(2)
    trans = np.stack([np.tile([0.9, 0.1], (2, 1)), np.tile([0.1, 0.9], (2, 1))])
    return DiscreteSequenceModel(np.array([0.5, 0.5]), initial, trans, 8, "copy-channel")


BUILTINS = {
    "iid-uniform": _iid_uniform,
    "strong-memory": _strong_memory,
    "copy-channel": _copy_channel,
}


def builtin_model(name: str) -> DiscreteSequenceModel:
    try:
        return BUILTINS[name]()
    except KeyError:
        raise KeyError(f"unknown builtin model {name!r}; choose from {sorted(BUILTINS)}") from None


# ---------------------------------------------------------------------------
# model files
# ---------------------------------------------------------------------------

MODEL_SECTION = "sequence_model"


def _floats(text: str, key: str) -> list[float]:
    try:
        return [float(v) for v in text.split()]
    except ValueError:
        raise ModelFormatError(f"{key}: expected whitespace-separated numbers") from None


def parse_sequence_model(text: str, name: str = "") -> DiscreteSequenceModel:
    """Parse the INI-style model format.

    ::

        [sequence_model]
        latent_size = 2
        vocab_size = 2
        horizon = 8            ; optional
        prior = 0.5 0.5
        initial.0 = 1 0        ; one line per latent value
        initial.1 = 0 1
        transition.0 = 0.9 0.1 ; 0.9 0.1   ; rows separated by ';'
        transition.1 = 0.1 0.9 ; 0.1 0.9
    """
    cp = configparser.ConfigParser(inline_comment_prefixes=None, comment_prefixes=("#",),
                                   interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ModelFormatError(str(exc)) from None
    if cp.sections() != [MODEL_SECTION]:
        raise ModelFormatError(f"expected exactly one [{MODEL_SECTION}] section")
    sec = cp[MODEL_SECTION]
    try:
        Z = int(sec["latent_size"])
        V = int(sec["vocab_size"])
        horizon = int(sec.get("horizon", "8"))
    except (KeyError, ValueError) as exc:
        raise ModelFormatError(f"bad or missing size field: {exc}") from None
    allowed = {"latent_size", "vocab_size", "horizon", "prior"}
    allowed |= {f"initial.{z}" for z in range(Z)} | {f"transition.{z}" for z in range(Z)}
    unknown = set(sec) - allowed
    if unknown:
        raise ModelFormatError(f"unknown keys: {sorted(unknown)}")
    try:
        prior = _floats(sec["prior"], "prior")
        initial = [_floats(sec[f"initial.{z}"], f"initial.{z}") for z in range(Z)]
        trans = [
            [_floats(row, f"transition.{z}") for row in sec[f"transition.{z}"].split(";")]
            for z in range(Z)
        ]
    except KeyError as exc:
        raise ModelFormatError(f"missing key {exc}") from None
    if len(prior) != Z or any(len(row) != V for row in initial) or any(
        len(rows) != V or any(len(r) != V for r in rows) for rows in trans
    ):
        raise ModelFormatError(f"table sizes do not match latent_size={Z}, vocab_size={V}")
    try:
        return DiscreteSequenceModel(np.array(prior), np.array(initial), np.array(trans), horizon, name)
    except ValueError as exc:
        raise ModelFormatError(str(exc)) from None


def format_sequence_model(model: DiscreteSequenceModel) -> str:
    def fmt(vals):
        return " ".join(repr(float(v)) for v in vals)

    buf = io.StringIO()
    buf.write(f"[{MODEL_SECTION}]\n")
    buf.write(f"latent_size = {model.latent_size}\nvocab_size = {model.vocab_size}\n")
    buf.write(f"horizon = {model.horizon}\nprior = {fmt(model.prior)}\n")
    for z in range(model.latent_size):
        buf.write(f"initial.{z} = {fmt(model.initial[z])}\n")
    for z in range(model.latent_size):
        buf.write(f"transition.{z} = " + " ; ".join(fmt(r) for r in model.transition[z]) + "\n")
    return buf.getvalue()


def write_curve_csv(curve: InfoCurve, fh, meta: dict[str, str] | None = None) -> None:
    """CSV with ``#`` metadata lines, then header and rows at 17 significant digits."""
    for k, v in (meta or {}).items():
        fh.write(f"# {k}: {v}\n")
    fh.write(",".join(InfoCurve.COLUMNS) + "\n")
    for row in curve.rows():
        fh.write(str(row[0]) + "," + ",".join(f"{v:.17g}" for v in row[1:]) + "\n")
