"""Multilevel network meta-regression for binary outcomes, with a synthetic
likelihood over published subgroup log-odds-ratio differences for studies that
withhold individual covariates.

The log posterior combines four additive components: Bernoulli-logit rows for
full-IPD studies, a marginalized likelihood over integration grids for studies
without covariates, the continuous synthetic likelihood for studies that also
report subgroup summaries, and independent normal priors. Gradients are
assembled by reverse-mode accumulation over the fixed pipeline (logit terms,
pattern-probability softmax, sequential relaxation, table aggregation,
moments, MVN quadratic form), with hand-derived adjoints at every stage.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass

import numpy as np

from ..bsl import (
    CrnStore,
    continuous_synth_loglik_grads,
    discrete_synth_loglik,
    relax_multinomial_batch,
    relax_multinomial_batch_vjp,
    synth_moments,
    synth_moments_vjp,
)
from ..errors import (
    AllZeroLikelihood,
    DegenerateSummaryStructure,
    EmptyGrid,
    MissingCovariates,
    NonFiniteDensity,
)
from ..mathcore import LOG_2PI, RngStream, log_sigmoid, sigmoid


class StudyKind(enum.Enum):
    FULL_IPD = "full_ipd"
    PARTIAL_IPD = "partial_ipd"
    PARTIAL_IPD_SUBGROUPS = "partial_ipd_subgroups"


@dataclass
class CovariateSpec:
    """Covariate metadata: model scale is value/divisor - center, with the
    center computed once from pooled full-IPD values and stored with the
    network. Subgroup thresholds stay on the original, uncentered scale."""

    name: str
    kind: str  # "continuous" | "binary"
    divisor: float = 1.0
    center: float = 0.0
    threshold: float | None = None

    def to_model_scale(self, x):
        return np.asarray(x, dtype=float) / self.divisor - self.center

    def to_original_scale(self, z):
        return (np.asarray(z, dtype=float) + self.center) * self.divisor


@dataclass
class TreatmentSpec:
    name: str
    trt_class: str | None = None
    reference: bool = False


@dataclass
class SubgroupEntry:
    covariate: str
    threshold: float
    treatment: str
    value: float


@dataclass
class SubgroupSummarySet:
    """Published subgroup log-OR differences (High minus Low) per covariate
    split and comparison treatment."""

    entries: list[SubgroupEntry]

    @property
    def dimension(self) -> int:
        return len(self.entries)

    def values(self) -> np.ndarray:
        return np.array([e.value for e in self.entries], dtype=float)


@dataclass
class StudyRecord:
    """One trial's evidence: IPD rows, or aggregate (y, t) counts with an
    integration grid, and optionally subgroup summaries."""

    id: str
    kind: StudyKind
    ipd_y: np.ndarray | None = None
    ipd_trt: list[str] | None = None
    ipd_x: np.ndarray | None = None  # original scale, (n, P)
    agg_counts: dict | None = None   # {(y, treatment name): count}
    integration_grid: np.ndarray | None = None  # model scale, (K, P)
    covariate_moments: dict | None = None       # original-scale marginals
    subgroup_summaries: SubgroupSummarySet | None = None

    def arm_names(self, treatments) -> list[str]:
        order = {t.name: i for i, t in enumerate(treatments)}
        if self.kind is StudyKind.FULL_IPD:
            present = set(self.ipd_trt)
        else:
            present = {t for (_, t) in self.agg_counts}
        return sorted(present, key=lambda n: order[n])


@dataclass
class Network:
    """In-memory evidence network; file I/O lives in the netdata module."""

    treatments: list[TreatmentSpec]
    covariates: list[CovariateSpec]
    studies: list[StudyRecord]
    default_K: int = 64

    def __post_init__(self):
        refs = [t for t in self.treatments if t.reference]
        if len(refs) != 1:
            raise ValueError(f"exactly one reference treatment required, got {len(refs)}")
        if not self.treatments[0].reference:
            self.treatments = refs + [t for t in self.treatments if not t.reference]

    @property
    def reference(self) -> str:
        return self.treatments[0].name

    def treatment_index(self, name: str) -> int:
        for i, t in enumerate(self.treatments):
            if t.name == name:
                return i
        raise KeyError(f"unknown treatment {name!r}")

    def study(self, study_id: str) -> StudyRecord:
        for s in self.studies:
            if s.id == study_id:
                return s
        raise KeyError(f"unknown study {study_id!r}")

    def class_labels(self) -> list[str]:
        """Distinct interaction classes for non-reference treatments, in first
        appearance order; unlabeled treatments form singleton classes."""
        labels = []
        for t in self.treatments[1:]:
            lab = t.trt_class if t.trt_class is not None else t.name
            if lab not in labels:
                labels.append(lab)
        return labels

    def class_index(self) -> dict[str, int | None]:
        labels = self.class_labels()
        out: dict[str, int | None] = {self.reference: None}
        for t in self.treatments[1:]:
            lab = t.trt_class if t.trt_class is not None else t.name
            out[t.name] = labels.index(lab)
        return out


@dataclass
class Priors:
    """Independent normal priors: weakly informative N(0, 5) on treatment,
    prognostic, and interaction effects; N(0, 10) on study intercepts."""

    mu_sd: float = 10.0
    gamma_sd: float = 5.0
    beta1_sd: float = 5.0
    beta2_sd: float = 5.0


@dataclass
class ParameterVector:
    """Model parameters on the unconstrained scale. The reference treatment is
    pinned: gamma holds T-1 free effects and beta2 one row per interaction
    class, none for the reference."""

    mu_study: np.ndarray
    gamma: np.ndarray
    beta1: np.ndarray
    beta2: np.ndarray

    def pack(self) -> np.ndarray:
        return np.concatenate([
            self.mu_study, self.gamma, self.beta1, np.asarray(self.beta2).ravel()
        ])

    @staticmethod
    def unpack(flat, J: int, T: int, P: int, C: int) -> "ParameterVector":
        flat = np.asarray(flat, dtype=float)
        expect = J + (T - 1) + P + C * P
        if flat.size != expect:
            raise ValueError(f"flat parameter vector has {flat.size} entries, expected {expect}")
        i = 0
        mu = flat[i:i + J]; i += J
        gamma = flat[i:i + T - 1]; i += T - 1
        beta1 = flat[i:i + P]; i += P
        beta2 = flat[i:].reshape(C, P)
        return ParameterVector(mu_study=mu, gamma=gamma, beta1=beta1, beta2=beta2)


def linear_predictor(theta: ParameterVector, network: Network, study_id: str,
                     treatment: str, x_model) -> float:
    """Logit-scale linear predictor for one individual at model-scale
    covariates x: mu_j + gamma_t + x:(beta1 + beta2_class(t))."""
    network.study(study_id)
    j = [s.id for s in network.studies].index(study_id)
    t = network.treatment_index(treatment)
    cls = network.class_index()[treatment]
    x_model = np.asarray(x_model, dtype=float)
    eta = theta.mu_study[j]
    if t > 0:
        eta += theta.gamma[t - 1]
    slope = theta.beta1 if cls is None else theta.beta1 + theta.beta2[cls]
    return float(eta + x_model @ slope)


def subgroup_logor_diff(table) -> float:
    """High-minus-Low difference of continuity-corrected log odds ratios.

    ``table`` has shape (2, 2, 2): (High/Low) x (treatment/reference) x
    (event/non-event). Every cell gets the +0.5 correction, so zero cells
    stay finite.
    """
    t = np.asarray(table, dtype=float) + 0.5
    if np.any(t < 0.5):
        raise ValueError("table cells must be nonnegative")
    log_or = np.log(t[:, 0, 0]) + np.log(t[:, 1, 1]) - np.log(t[:, 0, 1]) - np.log(t[:, 1, 0])
    return float(log_or[0] - log_or[1])


# ---------------------------------------------------------------------------
# per-study preparation

@dataclass
class _IpdPrep:
    j: int
    y: np.ndarray          # (n,)
    x: np.ndarray          # (n, P) model scale
    trt: np.ndarray        # (n,) global treatment indices
    arms: list[int]        # distinct global indices present


@dataclass
class _GridPrep:
    j: int
    grid: np.ndarray       # (K, P) model scale
    arms: list[int]        # global treatment indices present, sorted
    counts: np.ndarray     # (2, T_j) counts by (y, local arm)
    # BSL-only fields
    s_obs: np.ndarray | None = None
    entry_arm: np.ndarray | None = None    # (D,) local arm index per summary entry
    entry_mask: np.ndarray | None = None   # (D, K) High membership per entry
    ref_local: int = 0
    w_slice: slice | None = None


class NetworkModel:
    """Log posterior of the full evidence network with analytic gradient.

    Implements the differentiable-model contract for the sampler and exposes
    correction-time generated quantities (continuous and discrete synthetic
    log likelihoods) for the importance-sampling step.
    """

    def __init__(self, network: Network, crn: CrnStore | None = None,
                 priors: Priors | None = None, b_disc: int = 1000):
        self.network = network
        self.crn = crn
        self.priors = priors or Priors()
        self.b_disc = b_disc

        self.J = len(network.studies)
        self.T = len(network.treatments)
        self.P = len(network.covariates)
        self.class_labels = network.class_labels()
        self.C = len(self.class_labels)
        self.dim = self.J + (self.T - 1) + self.P + self.C * self.P
        cls_idx = network.class_index()
        # class row per global treatment index; -1 for the reference
        self._cls = np.array(
            [-1] + [cls_idx[t.name] for t in network.treatments[1:]], dtype=int
        )

        self._ipd: list[_IpdPrep] = []
        self._grid: list[_GridPrep] = []
        w_offset = 0
        for j, study in enumerate(network.studies):
            if study.kind is StudyKind.FULL_IPD:
                self._ipd.append(self._prep_ipd(j, study))
            else:
                prep = self._prep_grid(j, study)
                if study.kind is StudyKind.PARTIAL_IPD_SUBGROUPS:
                    n_w = 2 * len(prep.arms) * (prep.grid.shape[0] - 1)
                    prep.w_slice = slice(w_offset, w_offset + n_w)
                    w_offset += n_w
                self._grid.append(prep)
        self.n_relaxation_draws = w_offset
        if w_offset > 0:
            if crn is None:
                raise ValueError("network has synthetic-likelihood studies; a CrnStore is required")
            if crn.w.shape[1] < w_offset:
                raise ValueError(
                    f"CrnStore provides {crn.w.shape[1]} relaxation columns, need {w_offset}"
                )

    # -- preparation ------------------------------------------------------

    def _x_model(self, x_orig):
        cols = [cov.to_model_scale(x_orig[:, p]) for p, cov in enumerate(self.network.covariates)]
        return np.column_stack(cols) if cols else np.zeros((x_orig.shape[0], 0))

    def _prep_ipd(self, j, study) -> _IpdPrep:
        if study.ipd_x is None:
            raise MissingCovariates(f"study {study.id} lacks covariate rows")
        trt = np.array([self.network.treatment_index(t) for t in study.ipd_trt])
        return _IpdPrep(
            j=j, y=np.asarray(study.ipd_y, dtype=float),
            x=self._x_model(np.asarray(study.ipd_x, dtype=float)),
            trt=trt, arms=sorted(set(trt.tolist())),
        )

    def _prep_grid(self, j, study) -> _GridPrep:
        if study.integration_grid is None or study.integration_grid.size == 0:
            raise EmptyGrid(f"study {study.id} has no integration grid")
        arms = [self.network.treatment_index(t) for t in study.arm_names(self.network.treatments)]
        counts = np.zeros((2, len(arms)))
        for (y, tname), n in study.agg_counts.items():
            counts[int(y), arms.index(self.network.treatment_index(tname))] = n
        prep = _GridPrep(j=j, grid=np.asarray(study.integration_grid, dtype=float),
                         arms=arms, counts=counts)
        if study.kind is StudyKind.PARTIAL_IPD_SUBGROUPS:
            summ = study.subgroup_summaries
            if summ is None or summ.dimension == 0:
                raise ValueError(f"study {study.id} is marked for BSL but has no subgroup summaries")
            if 0 not in arms:
                raise ValueError(f"study {study.id} lacks the reference arm needed for comparisons")
            prep.ref_local = arms.index(0)
            prep.s_obs = summ.values()
            cov_names = [c.name for c in self.network.covariates]
            entry_arm = []
            masks = []
            for e in summ.entries:
                p = cov_names.index(e.covariate)
                cov = self.network.covariates[p]
                orig = cov.to_original_scale(prep.grid[:, p])
                masks.append(orig > e.threshold)
                entry_arm.append(arms.index(self.network.treatment_index(e.treatment)))
            prep.entry_arm = np.array(entry_arm, dtype=int)
            prep.entry_mask = np.asarray(masks, dtype=float)
            self._check_partitions(study, summ, prep)
        return prep

    @staticmethod
    def _check_partitions(study, summ, prep: _GridPrep):
        """Guard the synthetic covariance against structural singularity.

        Two summaries on the same comparison whose thresholds split the grid
        identically (or complementarily) are exactly collinear replicates, so
        the MVN fit degenerates no matter how many replicates are drawn. A
        split that leaves one subgroup empty is merely uninformative at this
        grid resolution and only warrants a diagnostic.
        """
        K = prep.grid.shape[0]
        seen: dict[tuple, str] = {}
        for d, e in enumerate(summ.entries):
            mask = prep.entry_mask[d].astype(bool)
            label = f"{e.covariate}>{e.threshold} vs {e.treatment}"
            if mask.all() or not mask.any():
                warnings.warn(
                    f"study {study.id}: split {label} leaves an empty subgroup at "
                    f"this K={K} grid (EmptySubgroup); its synthetic summary is "
                    "uninformative at this resolution",
                    RuntimeWarning,
                    stacklevel=4,
                )
                continue
            canonical = tuple(mask.tolist()) if mask[0] else tuple((~mask).tolist())
            key = (int(prep.entry_arm[d]), canonical)
            if key in seen:
                raise DegenerateSummaryStructure(
                    f"study {study.id}: splits {seen[key]} and {label} partition the "
                    f"K={K} integration grid identically, making their synthetic "
                    "summaries exactly collinear; rebuild the study grid with a "
                    "larger K"
                )
            seen[key] = label

    # -- shared forward pieces --------------------------------------------

    def _slopes(self, theta: ParameterVector) -> np.ndarray:
        """(T, P) covariate slope per global treatment."""
        slopes = np.tile(theta.beta1, (self.T, 1))
        for t in range(1, self.T):
            slopes[t] += theta.beta2[self._cls[t]]
        return slopes

    def _grid_eta(self, theta, prep: _GridPrep, slopes) -> np.ndarray:
        base = np.array([
            theta.mu_study[prep.j] + (theta.gamma[g - 1] if g > 0 else 0.0)
            for g in prep.arms
        ])
        return base[:, None] + slopes[prep.arms] @ prep.grid.T  # (T_j, K)

    def _scatter_eta_grad(self, grad, prep, eta_bar):
        """Map (T_j, K) adjoints of the grid linear predictor onto flat params."""
        J, T, P, C = self.J, self.T, self.P, self.C
        grad[prep.j] += eta_bar.sum()
        g_slice = grad[J:J + T - 1]
        b1_slice = grad[J + T - 1:J + T - 1 + P]
        b2 = grad[J + T - 1 + P:].reshape(C, P)
        per_arm = prep.grid.T @ eta_bar.T  # (P, T_j)
        b1_slice += per_arm.sum(axis=1)
        for a, g in enumerate(prep.arms):
            if g > 0:
                g_slice[g - 1] += eta_bar[a].sum()
                b2[self._cls[g]] += per_arm[:, a]

    @staticmethod
    def _stratum_logq(eta):
        """log P(y | pattern) for y=0,1: shape (2, T_j, K)."""
        return np.stack([log_sigmoid(-eta), log_sigmoid(eta)])

    def _pattern_probs(self, logq_yt) -> np.ndarray:
        m = logq_yt.max()
        if not np.isfinite(m):
            raise AllZeroLikelihood("every integration point has zero likelihood")
        p = np.exp(logq_yt - m)
        return p / p.sum()

    # -- likelihood components with gradient accumulation ------------------

    def _prior_terms(self, flat, grad):
        J, T, P, C = self.J, self.T, self.P, self.C
        sds = np.concatenate([
            np.full(J, self.priors.mu_sd),
            np.full(T - 1, self.priors.gamma_sd),
            np.full(P, self.priors.beta1_sd),
            np.full(C * P, self.priors.beta2_sd),
        ])
        grad -= flat / sds**2
        return float(-0.5 * np.sum((flat / sds) ** 2) - np.sum(np.log(sds)) - 0.5 * flat.size * LOG_2PI)

    def _ipd_terms(self, theta, prep: _IpdPrep, grad, slopes):
        eta = theta.mu_study[prep.j] + np.where(
            prep.trt > 0, theta.gamma[np.maximum(prep.trt - 1, 0)], 0.0
        ) + np.einsum("np,np->n", prep.x, slopes[prep.trt])
        s = 2.0 * prep.y - 1.0
        val = float(-np.sum(np.logaddexp(0.0, -s * eta)))
        r = prep.y - sigmoid(eta)  # d val / d eta
        J, T, P, C = self.J, self.T, self.P, self.C
        grad[prep.j] += r.sum()
        g_slice = grad[J:J + T - 1]
        b1_slice = grad[J + T - 1:J + T - 1 + P]
        b2 = grad[J + T - 1 + P:].reshape(C, P)
        b1_slice += prep.x.T @ r
        for g in prep.arms:
            if g > 0:
                rows = prep.trt == g
                contrib = prep.x[rows].T @ r[rows]
                g_slice[g - 1] += r[rows].sum()
                b2[self._cls[g]] += contrib
        return val

    def _marginal_terms(self, prep: _GridPrep, eta, logq, grad):
        """Marginalized aggregate likelihood; returns value, accumulates
        gradient through an eta adjoint."""
        K = eta.shape[1]
        val = 0.0
        eta_bar = np.zeros_like(eta)
        for y in (0, 1):
            for a in range(len(prep.arms)):
                n = prep.counts[y, a]
                if n == 0:
                    continue
                lq = logq[y, a]
                m = lq.max()
                lse = m + math.log(np.sum(np.exp(lq - m)))
                val += n * (lse - math.log(K))
                omega = np.exp(lq - lse)
                sgn = 1.0 if y == 1 else -1.0
                eta_bar[a] += n * omega * sgn * sigmoid(-sgn * eta[a])
        self._scatter_eta_grad(grad, prep, eta_bar)
        return val

    def _bsl_strata(self, prep: _GridPrep, logq):
        """Pattern probabilities and totals for every (y, arm) stratum,
        ordered arm-major then y."""
        S = 2 * len(prep.arms)
        K = logq.shape[2]
        probs = np.empty((S, K))
        totals = np.empty(S)
        for a in range(len(prep.arms)):
            for y in (0, 1):
                s = 2 * a + y
                probs[s] = self._pattern_probs(logq[y, a])
                totals[s] = prep.counts[y, a]
        return totals, probs

    @staticmethod
    def _tables_from_counts(prep: _GridPrep, counts):
        """Synthetic summaries from per-stratum pattern counts.

        ``counts`` has shape (S, B, K); returns (summaries (B, D), cells
        (D, 2, 4, B)) where cells are (High/Low) x (a, b, c, d) + 0.5.
        """
        D = prep.s_obs.size
        B = counts.shape[1]
        summaries = np.empty((B, D))
        cells = np.empty((D, 2, 4, B))
        for d in range(D):
            a_loc = prep.entry_arm[d]
            strata = (2 * a_loc + 1, 2 * a_loc + 0, 2 * prep.ref_local + 1, 2 * prep.ref_local + 0)
            mask = prep.entry_mask[d]
            for g, msk in enumerate((mask, 1.0 - mask)):
                for c4, s_idx in enumerate(strata):
                    cells[d, g, c4] = counts[s_idx] @ msk + 0.5
            log_or = (np.log(cells[d, :, 0]) - np.log(cells[d, :, 1])
                      - np.log(cells[d, :, 2]) + np.log(cells[d, :, 3]))
            summaries[:, d] = log_or[0] - log_or[1]
        return summaries, cells

    @staticmethod
    def _tables_vjp(prep: _GridPrep, cells, s_bar, counts_shape):
        """Adjoints of the per-stratum counts given adjoints of the summaries."""
        counts_bar = np.zeros(counts_shape)
        signs = (1.0, -1.0, -1.0, 1.0)
        D = prep.s_obs.size
        for d in range(D):
            a_loc = prep.entry_arm[d]
            strata = (2 * a_loc + 1, 2 * a_loc + 0, 2 * prep.ref_local + 1, 2 * prep.ref_local + 0)
            mask = prep.entry_mask[d]
            for g, (msk, gsign) in enumerate(((mask, 1.0), (1.0 - mask, -1.0))):
                for c4, s_idx in enumerate(strata):
                    coef = gsign * signs[c4] * s_bar[:, d] / cells[d, g, c4]  # (B,)
                    counts_bar[s_idx] += coef[:, None] * msk[None, :]
        return counts_bar

    def _bsl_terms(self, prep: _GridPrep, eta, logq, grad):
        """Continuous synthetic likelihood; returns (value, clamp count).

        ``grad`` may be None to skip the backward pass (correction-time use).
        """
        totals, probs = self._bsl_strata(prep, logq)
        K = probs.shape[1]
        B = self.crn.n_replicates
        w = self.crn.w[:, prep.w_slice].reshape(B, 2 * len(prep.arms), K - 1).transpose(1, 0, 2)
        tape = relax_multinomial_batch(totals, probs, w)
        summaries, cells = self._tables_from_counts(prep, tape.counts)
        moments = synth_moments(summaries)
        val, mean_bar, cov_bar = continuous_synth_loglik_grads(prep.s_obs, moments)
        if grad is None:
            return val, tape.n_clamped

        s_bar = synth_moments_vjp(summaries, moments, mean_bar, cov_bar)
        counts_bar = self._tables_vjp(prep, cells, s_bar, tape.counts.shape)
        probs_bar = relax_multinomial_batch_vjp(tape, counts_bar)

        eta_bar = np.zeros_like(eta)
        for a in range(len(prep.arms)):
            for y in (0, 1):
                s = 2 * a + y
                p = probs[s]
                lq_bar = p * (probs_bar[s] - float(probs_bar[s] @ p))
                sgn = 1.0 if y == 1 else -1.0
                eta_bar[a] += lq_bar * sgn * sigmoid(-sgn * eta[a])
        self._scatter_eta_grad(grad, prep, eta_bar)
        return val, tape.n_clamped

    # -- public contract ----------------------------------------------------

    def unpack(self, flat) -> ParameterVector:
        return ParameterVector.unpack(flat, self.J, self.T, self.P, self.C)

    def param_names(self) -> list[str]:
        names = [f"mu[{s.id}]" for s in self.network.studies]
        names += [f"gamma[{t.name}]" for t in self.network.treatments[1:]]
        names += [f"beta1[{c.name}]" for c in self.network.covariates]
        for lab in self.class_labels:
            names += [f"beta2[{lab},{c.name}]" for c in self.network.covariates]
        return names

    def evaluate(self, theta):
        val, grad, _ = self.evaluate_with_info(theta)
        return val, grad

    def evaluate_with_info(self, theta):
        flat = np.asarray(theta, dtype=float)
        pv = self.unpack(flat)
        grad = np.zeros(self.dim)
        val = self._prior_terms(flat, grad)
        slopes = self._slopes(pv)
        n_clamped = 0
        for prep in self._ipd:
            val += self._ipd_terms(pv, prep, grad, slopes)
        for prep in self._grid:
            eta = self._grid_eta(pv, prep, slopes)
            logq = self._stratum_logq(eta)
            val += self._marginal_terms(prep, eta, logq, grad)
            if prep.w_slice is not None:
                v, nc = self._bsl_terms(prep, eta, logq, grad)
                val += v
                n_clamped += nc
        if not np.isfinite(val):
            raise NonFiniteDensity(f"network log posterior is {val}")
        return val, grad, {"n_clamped": n_clamped}

    def generated_quantities(self, theta, rng: RngStream) -> dict[str, float]:
        """Continuous and exact-discrete synthetic log likelihoods at theta,
        for post-hoc importance reweighting. Runs outside the gradient path."""
        pv = self.unpack(np.asarray(theta, dtype=float))
        slopes = self._slopes(pv)
        l_cont = 0.0
        l_disc = 0.0
        for i, prep in enumerate(self._grid):
            if prep.w_slice is None:
                continue
            eta = self._grid_eta(pv, prep, slopes)
            logq = self._stratum_logq(eta)
            l_cont += self._bsl_terms(prep, eta, logq, None)[0]
            totals, probs = self._bsl_strata(prep, logq)
            strata = [(int(round(totals[s])), probs[s]) for s in range(totals.size)]

            def summarize(count_list, prep=prep):
                counts = np.stack(count_list)  # (S, B_disc, K)
                return self._tables_from_counts(prep, counts)[0]

            l_disc += discrete_synth_loglik(
                strata, summarize, prep.s_obs, self.b_disc,
                RngStream(rng.seed, (rng.stream_id << 8) + i),
            )
        return {"l_cont": l_cont, "l_disc": l_disc}


# ---------------------------------------------------------------------------
# module-level operations (value-only reference forms)

def full_ipd_loglik(theta: ParameterVector, network: Network, study_id: str) -> float:
    """Bernoulli-logit log likelihood over the study's individual rows."""
    model = _bare_model(network)
    study = network.study(study_id)
    if study.kind is not StudyKind.FULL_IPD:
        raise MissingCovariates(f"study {study_id} is not a full-IPD study")
    prep = next(p for p in model._ipd if network.studies[p.j].id == study_id)
    return model._ipd_terms(theta, prep, np.zeros(model.dim), model._slopes(theta))


def marginal_loglik(theta: ParameterVector, network: Network, study_id: str) -> float:
    """Aggregate-count likelihood marginalized over the integration grid."""
    model = _bare_model(network)
    prep = _grid_prep_for(model, network, study_id)
    eta = model._grid_eta(theta, prep, model._slopes(theta))
    return model._marginal_terms(prep, eta, model._stratum_logq(eta), np.zeros(model.dim))


def pattern_probs(theta: ParameterVector, network: Network, study_id: str,
                  y: int, treatment: str) -> np.ndarray:
    """Posterior probability that an individual with outcome y on the given
    treatment sits at each integration point; the uniform 1/K prior weights
    cancel in the ratio."""
    model = _bare_model(network)
    prep = _grid_prep_for(model, network, study_id)
    a = prep.arms.index(network.treatment_index(treatment))
    eta = model._grid_eta(theta, prep, model._slopes(theta))
    return model._pattern_probs(model._stratum_logq(eta)[int(y), a])


@dataclass
class BslState:
    """Stratum probabilities and totals frozen at one parameter value, plus
    the summary map, for the correction-time discrete pass."""

    strata: list
    s_obs: np.ndarray
    summarize: object


def bsl_study_loglik(theta: ParameterVector, network: Network, study_id: str,
                     crn: CrnStore) -> tuple[float, BslState]:
    """Continuous synthetic log likelihood of one subgroup-reporting study."""
    model = NetworkModel(network, crn=crn)
    prep = _grid_prep_for(model, network, study_id)
    if prep.w_slice is None:
        raise ValueError(f"study {study_id} has no subgroup summaries")
    eta = model._grid_eta(theta, prep, model._slopes(theta))
    logq = model._stratum_logq(eta)
    l_cont = model._bsl_terms(prep, eta, logq, np.zeros(model.dim))[0]
    totals, probs = model._bsl_strata(prep, logq)

    def summarize(count_list, prep=prep, model=model):
        return model._tables_from_counts(prep, np.stack(count_list))[0]

    state = BslState(
        strata=[(int(round(totals[s])), probs[s]) for s in range(totals.size)],
        s_obs=prep.s_obs, summarize=summarize,
    )
    return l_cont, state


def network_logposterior(theta, network: Network, crn: CrnStore | None,
                         priors: Priors | None = None):
    """(log posterior, gradient) for the whole network at flat or structured
    parameters."""
    model = NetworkModel(network, crn=crn, priors=priors)
    flat = theta.pack() if isinstance(theta, ParameterVector) else np.asarray(theta, dtype=float)
    return model.evaluate(flat)


def crn_for_network(network: Network, n_replicates: int, seed: int) -> CrnStore:
    """Common random numbers sized for every synthetic-likelihood study in the
    network: one relaxation column per (y, arm) stratum and non-final category."""
    n_w = 0
    for study in network.studies:
        if study.kind is StudyKind.PARTIAL_IPD_SUBGROUPS:
            K = study.integration_grid.shape[0]
            n_w += 2 * len(study.arm_names(network.treatments)) * (K - 1)
    return CrnStore.draw(n_replicates, 0, n_w, seed)


def _bare_model(network: Network) -> NetworkModel:
    needs_crn = any(s.kind is StudyKind.PARTIAL_IPD_SUBGROUPS for s in network.studies)
    crn = crn_for_network(network, 2, seed=0) if needs_crn else None
    return NetworkModel(network, crn=crn)


def _grid_prep_for(model: NetworkModel, network: Network, study_id: str) -> _GridPrep:
    network.study(study_id)
    for p in model._grid:
        if network.studies[p.j].id == study_id:
            return p
    raise EmptyGrid(f"study {study_id} has no integration grid (full-IPD study?)")
