"""Network data I/O and experiment scaffolding: JSON/CSV schema with
validation, synthetic trial-network generation with known ground truth,
quasi-Monte-Carlo integration grids, and the study-masking harness behind the
oracle / marginalized / synthetic-likelihood comparison.
"""

from __future__ import annotations

import copy
import csv
import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConsistencyError, NotIpdStudy, SchemaError
from .mathcore import RngStream, sigmoid, sobol_points, std_normal_quantile
from .models.nmr import (
    CovariateSpec,
    Network,
    ParameterVector,
    StudyKind,
    StudyRecord,
    SubgroupEntry,
    SubgroupSummarySet,
    TreatmentSpec,
    subgroup_logor_diff,
)

NetworkFile = Network  # the on-disk schema mirrors the in-memory network


class MaskMode(enum.Enum):
    DROP_COVARIATES = "drop_covariates"
    DROP_COVARIATES_KEEP_SUBGROUPS = "drop_covariates_keep_subgroups"


# ---------------------------------------------------------------------------
# integration grids

def build_integration_grid(covariates, moments, K, correlation=None) -> np.ndarray:
    """Model-scale integration points from reported marginal summaries.

    Sobol points (skipping the origin) map through each covariate's marginal
    inverse CDF: normal for continuous covariates, a prevalence threshold for
    binary ones (carried as exact 0/1 before centering). ``correlation``
    optionally couples coordinates through a Gaussian copula; the default is
    the independence copula.
    """
    P = len(covariates)
    if K < 1:
        raise ValueError("need at least one integration point")
    u = sobol_points(P, K + 1)[1:]  # drop the origin; Phi^-1(0) is -inf
    z = std_normal_quantile(np.clip(u, 1e-12, 1 - 1e-12))
    if correlation is not None:
        chol = np.linalg.cholesky(np.asarray(correlation, dtype=float))
        z = z @ chol.T
    grid = np.empty((K, P))
    from scipy.special import ndtr

    for p, cov in enumerate(covariates):
        m = moments[cov.name]
        if cov.kind == "continuous":
            orig = m["mean"] + m["sd"] * z[:, p]
        else:
            orig = (ndtr(z[:, p]) < m["prevalence"]).astype(float)
        grid[:, p] = cov.to_model_scale(orig)
    return grid


# ---------------------------------------------------------------------------
# simulation

@dataclass
class StudySimSpec:
    id: str
    n: int
    arms: list[str]
    covariate_marginals: dict  # name -> {"mean","sd"} or {"prevalence"}


@dataclass
class SimConfig:
    """Everything needed to simulate a network with known ground truth."""

    treatments: list[TreatmentSpec]
    covariates: list[CovariateSpec]
    studies: list[StudySimSpec]
    true_mu: list[float]
    true_gamma: list[float]
    true_beta1: list[float]
    true_beta2: list[list[float]]
    K: int = 64
    seed: int = 0
    masking: dict | None = None  # {"study": id, "mode": MaskMode value}

    def to_dict(self) -> dict:
        return {
            "treatments": [
                {"name": t.name, "class": t.trt_class, "reference": t.reference}
                for t in self.treatments
            ],
            "covariates": [
                {"name": c.name, "kind": c.kind, "divisor": c.divisor, "threshold": c.threshold}
                for c in self.covariates
            ],
            "studies": [
                {"id": s.id, "n": s.n, "arms": s.arms, "covariate_marginals": s.covariate_marginals}
                for s in self.studies
            ],
            "true_theta": {
                "mu": self.true_mu, "gamma": self.true_gamma,
                "beta1": self.true_beta1, "beta2": self.true_beta2,
            },
            "K": self.K,
            "seed": self.seed,
            "masking": self.masking,
        }

    @staticmethod
    def from_dict(d: dict) -> "SimConfig":
        try:
            treatments = [
                TreatmentSpec(t["name"], t.get("class"), t.get("reference", False))
                for t in d["treatments"]
            ]
            covariates = [
                CovariateSpec(c["name"], c["kind"], c.get("divisor", 1.0),
                              threshold=c.get("threshold"))
                for c in d["covariates"]
            ]
            studies = [
                StudySimSpec(s["id"], int(s["n"]), list(s["arms"]), s["covariate_marginals"])
                for s in d["studies"]
            ]
            tt = d["true_theta"]
            cfg = SimConfig(
                treatments=treatments, covariates=covariates, studies=studies,
                true_mu=list(tt["mu"]), true_gamma=list(tt["gamma"]),
                true_beta1=list(tt["beta1"]), true_beta2=[list(r) for r in tt["beta2"]],
                K=int(d.get("K", 64)), seed=int(d.get("seed", 0)),
                masking=d.get("masking"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"invalid simulation config: {exc}") from exc
        names = {s.id for s in cfg.studies}
        if cfg.masking is not None and cfg.masking.get("study") not in names:
            raise SchemaError(f"masking plan names unknown study {cfg.masking.get('study')!r}")
        return cfg

    def true_theta(self) -> ParameterVector:
        return ParameterVector(
            mu_study=np.array(self.true_mu, dtype=float),
            gamma=np.array(self.true_gamma, dtype=float),
            beta1=np.array(self.true_beta1, dtype=float),
            beta2=np.array(self.true_beta2, dtype=float),
        )


def example_sim_config(n_per_study=400, K=16, seed=0) -> SimConfig:
    """Desk-scale three-study, three-treatment, three-covariate design with a
    single nonzero effect modifier and class-shared interactions."""
    treatments = [
        TreatmentSpec("REF", reference=True),
        TreatmentSpec("TRT_B", trt_class="active"),
        TreatmentSpec("TRT_C", trt_class="active"),
    ]
    covariates = [
        CovariateSpec("sev", "continuous", divisor=10.0, threshold=55.0),
        CovariateSpec("dur", "continuous", divisor=10.0, threshold=20.0),
        CovariateSpec("prior_tx", "binary", divisor=1.0, threshold=0.5),
    ]
    studies = [
        StudySimSpec("study_1", n_per_study, ["REF", "TRT_B", "TRT_C"],
                     {"sev": {"mean": 50.0, "sd": 12.0}, "dur": {"mean": 18.0, "sd": 8.0},
                      "prior_tx": {"prevalence": 0.3}}),
        StudySimSpec("study_2", n_per_study, ["REF", "TRT_B", "TRT_C"],
                     {"sev": {"mean": 55.0, "sd": 12.0}, "dur": {"mean": 20.0, "sd": 8.0},
                      "prior_tx": {"prevalence": 0.45}}),
        StudySimSpec("study_3", n_per_study, ["REF", "TRT_B", "TRT_C"],
                     {"sev": {"mean": 60.0, "sd": 12.0}, "dur": {"mean": 22.0, "sd": 8.0},
                      "prior_tx": {"prevalence": 0.6}}),
    ]
    return SimConfig(
        treatments=treatments, covariates=covariates, studies=studies,
        true_mu=[-0.4, 0.0, 0.3], true_gamma=[0.9, 0.5],
        true_beta1=[0.5, -0.3, 0.4], true_beta2=[[0.9, 0.0, 0.0]],
        K=K, seed=seed,
        masking={"study": "study_3", "mode": MaskMode.DROP_COVARIATES_KEEP_SUBGROUPS.value},
    )


def simulate_network(config: SimConfig) -> tuple[Network, ParameterVector]:
    """Simulate complete IPD for every study at the true parameters.

    Covariates follow the per-study marginals; outcomes follow the logit
    model; centering constants come from the pooled simulated rows and are
    stored with the network. Bit-reproducible under a fixed seed.
    """
    covariates = [copy.deepcopy(c) for c in config.covariates]
    raw = []
    for j, spec in enumerate(config.studies):
        gen = RngStream(config.seed, 100 + j).generator()
        x = np.empty((spec.n, len(covariates)))
        for p, cov in enumerate(covariates):
            marg = spec.covariate_marginals[cov.name]
            if cov.kind == "continuous":
                x[:, p] = marg["mean"] + marg["sd"] * gen.standard_normal(spec.n)
            else:
                x[:, p] = (gen.uniform(size=spec.n) < marg["prevalence"]).astype(float)
        trt = [spec.arms[i % len(spec.arms)] for i in range(spec.n)]
        raw.append((spec, x, trt))

    pooled = np.vstack([x for _, x, _ in raw])
    for p, cov in enumerate(covariates):
        cov.center = float(np.mean(pooled[:, p] / cov.divisor))

    network = Network(treatments=copy.deepcopy(config.treatments),
                      covariates=covariates, studies=[], default_K=config.K)
    theta = config.true_theta()
    cls_idx = network.class_index()
    for j, (spec, x, trt) in enumerate(raw):
        gen = RngStream(config.seed, 200 + j).generator()
        x_model = np.column_stack([covariates[p].to_model_scale(x[:, p])
                                   for p in range(len(covariates))])
        eta = np.empty(spec.n)
        for i in range(spec.n):
            t = network.treatment_index(trt[i])
            slope = theta.beta1.copy()
            if t > 0:
                slope += theta.beta2[cls_idx[trt[i]]]
            eta[i] = theta.mu_study[j] + (theta.gamma[t - 1] if t > 0 else 0.0) + x_model[i] @ slope
        y = (gen.uniform(size=spec.n) < sigmoid(eta)).astype(int)
        network.studies.append(StudyRecord(
            id=spec.id, kind=StudyKind.FULL_IPD,
            ipd_y=y, ipd_trt=list(trt), ipd_x=x,
            agg_counts=_tally(y, trt),
        ))
    return network, theta


def _tally(y, trt) -> dict:
    counts: dict = {}
    for yi, ti in zip(y, trt):
        counts[(int(yi), ti)] = counts.get((int(yi), ti), 0) + 1
    return counts


# ---------------------------------------------------------------------------
# masking

def subgroup_summaries_from_ipd(network: Network, study: StudyRecord) -> SubgroupSummarySet:
    """Tabulate High/Low 2x2 tables from raw IPD for every covariate split and
    non-reference arm, and return the continuity-corrected log-OR differences."""
    if study.kind is not StudyKind.FULL_IPD:
        raise NotIpdStudy(f"study {study.id} has no IPD")
    ref = network.reference
    trt_arr = np.asarray(study.ipd_trt)
    y = np.asarray(study.ipd_y)
    entries = []
    arms = [a for a in study.arm_names(network.treatments) if a != ref]
    for t in arms:
        for p, cov in enumerate(network.covariates):
            if cov.threshold is None:
                continue
            high = study.ipd_x[:, p] > cov.threshold
            table = np.zeros((2, 2, 2))
            for g, grp in enumerate((high, ~high)):
                for a, arm in enumerate((t, ref)):
                    rows = grp & (trt_arr == arm)
                    table[g, a, 0] = np.sum(y[rows] == 1)
                    table[g, a, 1] = np.sum(y[rows] == 0)
            entries.append(SubgroupEntry(
                covariate=cov.name, threshold=cov.threshold, treatment=t,
                value=subgroup_logor_diff(table),
            ))
    return SubgroupSummarySet(entries=entries)


def mask_study(network: Network, study_id: str, mode: MaskMode, K: int | None = None) -> Network:
    """Replace one full-IPD study by its aggregate view.

    Covariate rows are dropped; (y, t) counts are kept; the integration grid is
    rebuilt from the study's own empirical covariate moments. The subgroup mode
    additionally computes the summary set from the pre-mask IPD, treated
    downstream as if published. Outcome and treatment data are never altered.
    """
    masked = copy.deepcopy(network)
    study = masked.study(study_id)
    if study.kind is not StudyKind.FULL_IPD:
        raise NotIpdStudy(f"study {study_id} has no IPD to mask")
    K = K if K is not None else masked.default_K
    moments = {}
    for p, cov in enumerate(masked.covariates):
        col = study.ipd_x[:, p]
        if cov.kind == "continuous":
            moments[cov.name] = {"mean": float(col.mean()), "sd": float(col.std(ddof=1))}
        else:
            moments[cov.name] = {"prevalence": float(col.mean())}
    agg = _tally(study.ipd_y, study.ipd_trt)
    summaries = None
    if mode is MaskMode.DROP_COVARIATES_KEEP_SUBGROUPS:
        summaries = subgroup_summaries_from_ipd(network, network.study(study_id))
    study.kind = (StudyKind.PARTIAL_IPD_SUBGROUPS
                  if mode is MaskMode.DROP_COVARIATES_KEEP_SUBGROUPS
                  else StudyKind.PARTIAL_IPD)
    study.agg_counts = agg
    study.integration_grid = build_integration_grid(masked.covariates, moments, K)
    study.covariate_moments = moments
    study.subgroup_summaries = summaries
    study.ipd_y = None
    study.ipd_trt = None
    study.ipd_x = None
    return masked


# ---------------------------------------------------------------------------
# file formats: network.json + one CSV of IPD rows per full-IPD study

def save_network(network: Network, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {
        "treatments": [
            {"name": t.name, "class": t.trt_class, "reference": t.reference}
            for t in network.treatments
        ],
        "covariates": [
            {"name": c.name, "kind": c.kind, "divisor": c.divisor,
             "center": c.center, "threshold": c.threshold}
            for c in network.covariates
        ],
        "default_K": network.default_K,
        "studies": [],
    }
    for study in network.studies:
        entry: dict = {
            "id": study.id,
            "kind": study.kind.value,
            "agg_counts": [
                {"y": y, "trt": t, "n": n}
                for (y, t), n in sorted(study.agg_counts.items(), key=lambda kv: (kv[0][1], kv[0][0]))
            ] if study.agg_counts else None,
        }
        if study.kind is StudyKind.FULL_IPD:
            entry["ipd_csv"] = f"{study.id}.csv"
            _write_ipd_csv(out_dir / f"{study.id}.csv", network, study)
        else:
            entry["covariate_moments"] = study.covariate_moments
            entry["integration_grid"] = study.integration_grid.tolist()
            if study.subgroup_summaries is not None:
                entry["subgroup_summaries"] = [
                    {"covariate": e.covariate, "threshold": e.threshold,
                     "treatment": e.treatment, "value": e.value}
                    for e in study.subgroup_summaries.entries
                ]
        doc["studies"].append(entry)
    path = out_dir / "network.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))
    return path


def _write_ipd_csv(path, network, study):
    arm_order = study.arm_names(network.treatments)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["study", "arm", "y", "trt"] + [f"x{p + 1}" for p in range(len(network.covariates))])
        for i in range(len(study.ipd_y)):
            writer.writerow(
                [study.id, arm_order.index(study.ipd_trt[i]) + 1,
                 int(study.ipd_y[i]), study.ipd_trt[i]]
                + [repr(float(v)) for v in study.ipd_x[i]]
            )


def load_network(path) -> Network:
    """Load and validate a network document, cross-checking aggregate counts
    against IPD tallies wherever both are present."""
    path = Path(path)
    if path.is_dir():
        path = path / "network.json"
    if not path.exists():
        raise SchemaError(f"no network file at {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"network.json does not parse: {exc}") from exc

    for key in ("treatments", "covariates", "studies"):
        if key not in doc:
            raise SchemaError(f"missing top-level field {key!r}")
    treatments = [
        TreatmentSpec(t["name"], t.get("class"), t.get("reference", False))
        for t in doc["treatments"]
    ]
    if sum(t.reference for t in treatments) != 1:
        raise SchemaError("exactly one treatment must be marked as reference")
    covariates = [
        CovariateSpec(c["name"], c["kind"], c.get("divisor", 1.0),
                      c.get("center", 0.0), c.get("threshold"))
        for c in doc["covariates"]
    ]
    for c in covariates:
        if c.kind not in ("continuous", "binary"):
            raise SchemaError(f"covariate {c.name!r}: unknown kind {c.kind!r}")
    declared = {t.name for t in treatments}
    cov_names = {c.name for c in covariates}

    studies = []
    for s in doc["studies"]:
        sid = s.get("id")
        if not sid:
            raise SchemaError("study without an id")
        try:
            kind = StudyKind(s["kind"])
        except (KeyError, ValueError) as exc:
            raise SchemaError(f"study {sid}: bad kind {s.get('kind')!r}") from exc
        agg = None
        if s.get("agg_counts") is not None:
            agg = {}
            for row in s["agg_counts"]:
                if row["trt"] not in declared:
                    raise SchemaError(f"study {sid}: undeclared treatment {row['trt']!r} in agg_counts")
                if row["y"] not in (0, 1) or row["n"] < 0:
                    raise SchemaError(f"study {sid}: bad count row {row}")
                agg[(int(row["y"]), row["trt"])] = int(row["n"])
        record = StudyRecord(id=sid, kind=kind, agg_counts=agg)
        if kind is StudyKind.FULL_IPD:
            csv_path = path.parent / s.get("ipd_csv", f"{sid}.csv")
            if not csv_path.exists():
                raise SchemaError(f"study {sid}: IPD file {csv_path.name} not found")
            record.ipd_y, record.ipd_trt, record.ipd_x = _read_ipd_csv(csv_path, sid, declared, len(covariates))
            if agg is not None:
                _check_counts(sid, agg, _tally(record.ipd_y, record.ipd_trt))
        else:
            if agg is None:
                raise SchemaError(f"study {sid}: aggregate study needs agg_counts")
            grid = s.get("integration_grid")
            if grid is not None:
                record.integration_grid = np.asarray(grid, dtype=float)
                if record.integration_grid.ndim != 2 or record.integration_grid.shape[1] != len(covariates):
                    raise SchemaError(f"study {sid}: integration grid shape mismatch")
            elif s.get("covariate_moments"):
                record.integration_grid = build_integration_grid(
                    covariates, s["covariate_moments"], int(doc.get("default_K", 64)))
            else:
                raise SchemaError(f"study {sid}: needs integration_grid or covariate_moments")
            record.covariate_moments = s.get("covariate_moments")
            if s.get("subgroup_summaries"):
                entries = []
                for e in s["subgroup_summaries"]:
                    if e["covariate"] not in cov_names:
                        raise SchemaError(f"study {sid}: unknown covariate {e['covariate']!r} in summaries")
                    if e["treatment"] not in declared:
                        raise SchemaError(f"study {sid}: unknown treatment {e['treatment']!r} in summaries")
                    entries.append(SubgroupEntry(e["covariate"], float(e["threshold"]),
                                                 e["treatment"], float(e["value"])))
                record.subgroup_summaries = SubgroupSummarySet(entries)
            elif kind is StudyKind.PARTIAL_IPD_SUBGROUPS:
                raise SchemaError(f"study {sid}: subgroup kind without subgroup_summaries")
        studies.append(record)
    return Network(treatments=treatments, covariates=covariates,
                   studies=studies, default_K=int(doc.get("default_K", 64)))


def _read_ipd_csv(csv_path, sid, declared, P):
    ys, trts, xs = [], [], []
    with open(csv_path, newline="") as fh:
        reader = csv.DictReader(fh)
        for ln, row in enumerate(reader, start=2):
            if row["trt"] not in declared:
                raise SchemaError(f"{csv_path.name} line {ln}: undeclared treatment {row['trt']!r}")
            if row["y"] not in ("0", "1"):
                raise SchemaError(f"{csv_path.name} line {ln}: y must be 0/1, got {row['y']!r}")
            ys.append(int(row["y"]))
            trts.append(row["trt"])
            try:
                xs.append([float(row[f"x{p + 1}"]) for p in range(P)])
            except (KeyError, ValueError) as exc:
                raise SchemaError(f"{csv_path.name} line {ln}: bad covariate value ({exc})") from exc
    return np.array(ys), trts, np.array(xs)


def _check_counts(sid, agg, tally):
    cells = set(agg) | set(tally)
    for cell in sorted(cells, key=lambda c: (c[1], c[0])):
        if agg.get(cell, 0) != tally.get(cell, 0):
            y, t = cell
            raise ConsistencyError(
                f"study {sid}: aggregate count for (y={y}, trt={t}) is "
                f"{agg.get(cell, 0)} but IPD tallies {tally.get(cell, 0)}"
            )
