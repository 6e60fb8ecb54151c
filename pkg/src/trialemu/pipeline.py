"""Staged trial-emulation pipeline with hashed, resumable artifacts.

Seven stages run in order: filter (eligibility), stratify (baseline-risk
model, buckets, quotas), match, tune (counterfactual models + weight
tuning), constrain (reward adjustment), tree (policy-tree grid + selection)
and validate (subgroup reports, KM/log-rank, balance audit). Every stage
writes plain CSV/JSON artifacts into the run directory and records their
content hashes in ``manifest.json``; a rerun resumes from intact artifacts
and refuses to build on tampered ones.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import yaml

from . import counterfactual, learner, policy_tree, stratify_match, survival_stats
from .cohort import (
    Cohort,
    CovariateSchema,
    apply_eligibility,
    binarize_at_horizon,
    load_cohort,
    load_trial_config,
    save_cohort,
)
from .errors import ArtifactError, ConfigError, InsufficientDataError

STAGES = ("filter", "stratify", "match", "tune", "constrain", "tree", "validate")

CLINICAL_SCORE_FIELDS = (
    "node_positive", "dfi_months", "n_tumors", "max_size_cm",
    "cea_ng_ml", "kras_mutated",
)


@dataclass(frozen=True)
class PipelineConfig:
    cohort_path: str
    trial_path: str
    schema: CovariateSchema
    seed: int = 0
    learner_config: learner.LearnerConfig = learner.LearnerConfig()
    counterfactual_config: learner.LearnerConfig = learner.LearnerConfig(bootstrap=False)
    boundaries: tuple = (0.0, 0.25, 0.5, 0.75, 1.0)
    quotas: tuple | None = None  # None = derive with default_quotas
    match_mode: str = "heuristic"
    move_budget: int = 10**6
    distance_covariates: tuple = ()
    lambda_outcome: float = 1.0
    lambda_covariate: float = 1.0
    lambda_distance: float = 1.0
    tune_arms: tuple = (0, 1)
    tune_tol: float = counterfactual.RHO_TOL_DEFAULT
    rho_max: float = counterfactual.RHO_MAX_DEFAULT
    constrain_factor: float | None = 0.78
    constrain_direction: str = "favor-treatment"
    tree_grid: tuple = (
        policy_tree.PolicyTreeConfig(max_depth=1),
        policy_tree.PolicyTreeConfig(max_depth=2),
        policy_tree.PolicyTreeConfig(max_depth=3),
    )
    min_effect: float = 0.05

    def __post_init__(self):
        if self.match_mode not in ("heuristic", "exact"):
            raise ConfigError(f"unknown match mode {self.match_mode!r}")
        for arm in self.tune_arms:
            if arm not in (0, 1):
                raise ConfigError("tune arms must be 0 and/or 1")
        if not self.tree_grid:
            raise ConfigError("tree grid must contain at least one config")

    def describe(self) -> dict:
        """Canonical dict used for the manifest's config digest."""
        return {
            "cohort_path": str(self.cohort_path),
            "trial_path": str(self.trial_path),
            "schema": {"names": list(self.schema.names),
                       "kinds": list(self.schema.kinds)},
            "seed": self.seed,
            "learner": self.learner_config.__dict__,
            "counterfactual_learner": self.counterfactual_config.__dict__,
            "boundaries": list(self.boundaries),
            "quotas": list(self.quotas) if self.quotas is not None else "auto",
            "match_mode": self.match_mode,
            "move_budget": self.move_budget,
            "distance_covariates": list(self.distance_covariates),
            "lambdas": [self.lambda_outcome, self.lambda_covariate,
                        self.lambda_distance],
            "tune_arms": list(self.tune_arms),
            "tune_tol": self.tune_tol,
            "rho_max": self.rho_max,
            "constrain_factor": self.constrain_factor,
            "constrain_direction": self.constrain_direction,
            "tree_grid": [tc.__dict__ for tc in self.tree_grid],
            "min_effect": self.min_effect,
        }


def load_pipeline_config(path, seed: int | None = None) -> PipelineConfig:
    """Read a pipeline config YAML; relative paths resolve against it."""
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        raw = yaml.safe_load(fh) or {}
    base = path.parent

    def resolve(p):
        p = Path(p)
        return str(p if p.is_absolute() else base / p)

    try:
        entries = raw["covariates"]
        schema = CovariateSchema(
            names=tuple(e["name"] for e in entries),
            kinds=tuple(e["kind"] for e in entries),
            units=tuple(e.get("unit", "") for e in entries),
        )
        cohort_path = resolve(raw["cohort"])
        trial_path = resolve(raw["trial"])
    except KeyError as exc:
        raise ConfigError(f"{path}: missing required key {exc}") from None

    def learner_from(key, default):
        section = raw.get(key) or {}
        return replace(default, **{k: section[k] for k in section})

    match = raw.get("match") or {}
    tune = raw.get("tune") or {}
    constrain = raw.get("constrain") or {}
    tree = raw.get("tree") or {}
    quotas = raw.get("quotas", "auto")
    grid = []
    for entry in tree.get("grid") or [{"max_depth": d} for d in (1, 2, 3)]:
        grid.append(policy_tree.PolicyTreeConfig(
            max_depth=int(entry.get("max_depth", 3)),
            min_leaf=int(entry.get("min_leaf", tree.get("min_leaf", 20))),
            local_search_passes=int(tree.get("local_search_passes", 2)),
            lookahead_width=int(tree.get("lookahead_width", 16)),
        ))
    try:
        return PipelineConfig(
            cohort_path=cohort_path,
            trial_path=trial_path,
            schema=schema,
            seed=int(raw.get("seed", 0)) if seed is None else int(seed),
            learner_config=learner_from("learner", learner.LearnerConfig()),
            counterfactual_config=learner_from(
                "counterfactual_learner", learner.LearnerConfig(bootstrap=False)),
            boundaries=tuple(float(b) for b in raw.get(
                "buckets", (0.0, 0.25, 0.5, 0.75, 1.0))),
            quotas=None if quotas == "auto" else tuple(int(q) for q in quotas),
            match_mode=match.get("mode", "heuristic"),
            move_budget=int(match.get("move_budget", 10**6)),
            distance_covariates=tuple(match.get("distance_covariates") or ()),
            lambda_outcome=float(match.get("lambda_outcome", 1.0)),
            lambda_covariate=float(match.get("lambda_covariate", 1.0)),
            lambda_distance=float(match.get("lambda_distance", 1.0)),
            tune_arms=tuple(tune.get("arms", (0, 1))),
            tune_tol=float(tune.get("tol", counterfactual.RHO_TOL_DEFAULT)),
            rho_max=float(tune.get("rho_max", counterfactual.RHO_MAX_DEFAULT)),
            constrain_factor=(None if constrain.get("factor") is None
                              else float(constrain["factor"])),
            constrain_direction=constrain.get("direction", "favor-treatment"),
            tree_grid=tuple(grid),
            min_effect=float(tree.get("min_effect", 0.05)),
        )
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


# --- artifact helpers -------------------------------------------------------

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n",
                    encoding="utf-8")


def _read_json(path: Path):
    return json.loads(path.read_text(encoding="utf-8"))


def _require(out: Path, *names):
    missing = [n for n in names if not (out / n).exists()]
    if missing:
        raise ArtifactError(
            f"missing artifacts {missing}; rerun the stages that produce them")


def _load_risks(out: Path) -> dict:
    risks = {}
    with open(out / "risks.csv", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        for pid, risk in reader:
            risks[pid] = float(risk)
    return risks


def _load_pairs(out: Path):
    pairs = []
    with open(out / "matches.csv", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        for tid, cid, bucket in reader:
            pairs.append((tid, cid, int(bucket)))
    return pairs


def _load_rewards(out: Path, name: str) -> counterfactual.RewardMatrix:
    ids, rows = [], []
    with open(out / name, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        for pid, r0, r1 in reader:
            ids.append(pid)
            rows.append((float(r0), float(r1)))
    meta = _read_json(out / "tune.json")
    return counterfactual.RewardMatrix(
        ids=tuple(ids), rewards=np.array(rows), horizon=meta["horizon_months"],
        model_digests=tuple(meta["model_digests"]))


def _matched_cohort(config: PipelineConfig, out: Path) -> Cohort:
    eligible = load_cohort(out / "eligible.csv", config.schema)
    matched_ids = [pid for tid, cid, _ in _load_pairs(out) for pid in (tid, cid)]
    return eligible.subset(matched_ids)


def _tree_from_artifact(out: Path) -> policy_tree.PolicyTree:
    doc = _read_json(out / "tree.json")

    def decode(raw):
        if "feature" in raw:
            nd = policy_tree.Node(feature=raw["feature"],
                                  threshold=raw["threshold"],
                                  left=decode(raw["left"]),
                                  right=decode(raw["right"]))
        else:
            nd = policy_tree.Node(arm=raw["treatment"], n=raw["n"],
                                  mean_r0=raw["mean_reward_control"],
                                  mean_r1=raw["mean_reward_treatment"])
        nd.node_id = raw["id"]
        return nd

    root = decode(doc["tree"])
    tree = policy_tree.PolicyTree(
        root=root, config=policy_tree.PolicyTreeConfig(),
        n_features=doc["n_features"], training_value=doc["training_value"])
    queue = [root]
    while queue:
        nd = queue.pop(0)
        tree.nodes.append(nd)
        if not nd.is_leaf:
            queue.extend([nd.left, nd.right])
    return tree


def _build_problem(config: PipelineConfig, eligible: Cohort, risks: dict,
                   quotas=None) -> stratify_match.MatchProblem:
    target, _rules = load_trial_config(config.trial_path, config.schema)
    treated = [p for p in eligible if p.treatment == 1]
    untreated = [p for p in eligible if p.treatment == 0]
    spec = stratify_match.BucketSpec(config.boundaries)
    if quotas is not None:
        spec = spec.with_quotas(quotas)
    return stratify_match.MatchProblem(
        treated_ids=tuple(p.id for p in treated),
        treated_risks=np.array([risks[p.id] for p in treated]),
        treated_X=np.array([p.covariates for p in treated]),
        untreated_ids=tuple(p.id for p in untreated),
        untreated_risks=np.array([risks[p.id] for p in untreated]),
        untreated_X=np.array([p.covariates for p in untreated]),
        buckets=spec,
        target=target,
        covariate_names=config.schema.names,
        distance_covariates=config.distance_covariates,
        lambda_outcome=config.lambda_outcome,
        lambda_covariate=config.lambda_covariate,
        lambda_distance=config.lambda_distance,
    )


# --- stages -----------------------------------------------------------------

def _stage_filter(config: PipelineConfig, out: Path):
    cohort = load_cohort(config.cohort_path, config.schema)
    _target, rules = load_trial_config(config.trial_path, config.schema)
    result = apply_eligibility(cohort, rules)
    save_cohort(result.cohort, out / "eligible.csv")
    _write_json(out / "filter.json", {
        "n_input": len(cohort),
        "n_eligible": len(result.cohort),
        "exclusions": result.exclusions,
    })
    return ["eligible.csv", "filter.json"]


def _stage_stratify(config: PipelineConfig, out: Path):
    _require(out, "eligible.csv")
    eligible = load_cohort(out / "eligible.csv", config.schema)
    target, _rules = load_trial_config(config.trial_path, config.schema)
    untreated = Cohort(config.schema, [p for p in eligible if p.treatment == 0])
    if len(untreated) == 0:
        raise InsufficientDataError("no untreated patients to fit the risk model")
    hl = binarize_at_horizon(untreated, target.horizon_months)
    train = untreated.subset(hl.ids)
    model = learner.fit(
        train.covariate_matrix(), hl.labels, np.ones(len(hl.ids)),
        replace(config.learner_config, seed=config.seed))
    (out / "xray_model.json").write_text(model.to_json() + "\n", encoding="utf-8")

    risks = learner.predict_prob(model, eligible.covariate_matrix())
    with open(out / "risks.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "risk"])
        for pid, r in zip(eligible.ids, risks):
            writer.writerow([pid, repr(float(r))])

    problem = _build_problem(config, eligible, dict(zip(eligible.ids, risks)))
    if config.quotas is not None:
        quotas = config.quotas
    else:
        quotas = stratify_match.default_quotas(problem)
    counts = {
        "treated": [int((problem.treated_bucket == k).sum())
                    for k in range(problem.buckets.n_buckets)],
        "untreated": [int((problem.untreated_bucket == k).sum())
                      for k in range(problem.buckets.n_buckets)],
    }
    _write_json(out / "stratify.json", {
        "boundaries": list(config.boundaries),
        "quotas": list(quotas),
        "bucket_counts": counts,
        "n_training": len(hl.ids),
        "n_censored_excluded": len(hl.excluded_ids),
    })
    return ["xray_model.json", "risks.csv", "stratify.json"]


def _stage_match(config: PipelineConfig, out: Path):
    _require(out, "eligible.csv", "risks.csv", "stratify.json")
    eligible = load_cohort(out / "eligible.csv", config.schema)
    quotas = _read_json(out / "stratify.json")["quotas"]
    problem = _build_problem(config, eligible, _load_risks(out), quotas=quotas)
    solution = stratify_match.solve(
        problem, mode=config.match_mode, seed=config.seed,
        move_budget=config.move_budget)
    bucket_of = dict(zip(problem.treated_ids, problem.treated_bucket))
    with open(out / "matches.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["treated_id", "untreated_id", "bucket"])
        for tid, cid in solution.pairs:
            writer.writerow([tid, cid, int(bucket_of[tid])])
    _write_json(out / "match.json", {
        "mode": config.match_mode,
        "objective": solution.objective,
        "breakdown": solution.breakdown,
        "achieved": solution.achieved,
        "targets": {
            "mu0": problem.target.mu0,
            "mu1": problem.target.mu1,
            "risk_target": problem.risk_target,
            "covariate_targets": {
                name: list(arms)
                for name, arms in sorted(problem.target.covariate_targets.items())
            },
        },
        "n_pairs": len(solution.pairs),
    })
    return ["matches.csv", "match.json"]


def _stage_tune(config: PipelineConfig, out: Path):
    _require(out, "eligible.csv", "matches.csv")
    matched = _matched_cohort(config, out)
    target, _rules = load_trial_config(config.trial_path, config.schema)
    horizon = target.horizon_months
    cf_config = replace(config.counterfactual_config, seed=config.seed + 1)

    rhos = {0: 1.0, 1: 1.0}
    traces = {}
    for arm, mu in ((0, target.mu0), (1, target.mu1)):
        if arm not in config.tune_arms:
            continue
        trace = counterfactual.TuningTrace([], [], [])
        rhos[arm] = counterfactual.tune_weight(
            matched, arm, mu, horizon, cf_config,
            tol=config.tune_tol, rho_max=config.rho_max, trace=trace)
        traces[str(arm)] = {
            "rho_sequence": trace.rho_sequence,
            "hbar_sequence": trace.hbar_sequence,
            "residuals": trace.residuals,
            "method": trace.method,
        }
    pair = counterfactual.fit_counterfactuals(
        matched, horizon, cf_config, rho0=rhos[0], rho1=rhos[1])
    matrix = counterfactual.reward_matrix(pair, matched, horizon)
    with open(out / "rewards.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "reward_control", "reward_treatment"])
        for pid, (r0, r1) in zip(matrix.ids, matrix.rewards):
            writer.writerow([pid, repr(float(r0)), repr(float(r1))])
    _write_json(out / "tune.json", {
        "horizon_months": horizon,
        "rho0": pair.rho0, "rho1": pair.rho1,
        "hbar0": pair.hbar0, "hbar1": pair.hbar1,
        "targets": {"mu0": target.mu0, "mu1": target.mu1},
        "model_digests": list(matrix.model_digests),
        "traces": traces,
    })
    return ["rewards.csv", "tune.json"]


def _stage_constrain(config: PipelineConfig, out: Path):
    _require(out, "rewards.csv", "tune.json")
    matrix = _load_rewards(out, "rewards.csv")
    if config.constrain_factor is None:
        constrained = matrix
        meta = {"enabled": False}
    else:
        constrained = counterfactual.constrain_rewards(
            matrix, config.constrain_factor, config.constrain_direction)
        meta = {
            "enabled": True,
            "factor": config.constrain_factor,
            "direction": config.constrain_direction,
            "n_rows_adjusted": int(
                (constrained.rewards != matrix.rewards).any(axis=1).sum()),
        }
    with open(out / "rewards_constrained.csv", "w", newline="",
              encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "reward_control", "reward_treatment"])
        for pid, (r0, r1) in zip(constrained.ids, constrained.rewards):
            writer.writerow([pid, repr(float(r0)), repr(float(r1))])
    _write_json(out / "constrain.json", meta)
    return ["rewards_constrained.csv", "constrain.json"]


def _stage_tree(config: PipelineConfig, out: Path):
    _require(out, "eligible.csv", "matches.csv", "rewards_constrained.csv")
    matched = _matched_cohort(config, out)
    matrix = _load_rewards(out, "rewards_constrained.csv")
    if tuple(matrix.ids) != tuple(matched.ids):
        raise ArtifactError("rewards_constrained.csv ids disagree with matches.csv")
    X = matched.covariate_matrix()
    candidates = []
    for tc in config.tree_grid:
        tc = replace(tc, seed=config.seed)
        candidates.append((tc, policy_tree.fit_policy_tree(X, matrix, tc)))
    selected = policy_tree.select_tree(candidates, matrix, X)
    (out / "tree.json").write_text(selected.to_json() + "\n", encoding="utf-8")
    (out / "tree.txt").write_text(
        selected.render_text(list(config.schema.names)) + "\n", encoding="utf-8")
    _write_json(out / "tree_meta.json", {
        "grid": [
            {
                "max_depth": tc.max_depth,
                "min_leaf": tc.min_leaf,
                "concordance": policy_tree.concordance(tree, matrix, X),
                "n_leaves": len(tree.leaves()),
                "depth": tree.depth(),
                "training_value": tree.training_value,
                "selected": tree is selected,
            }
            for tc, tree in candidates
        ],
    })
    return ["tree.json", "tree.txt", "tree_meta.json"]


def _km_rows(times, events):
    curve = survival_stats.km_curve(times, events)
    return [
        [f"{t:.4f}", f"{s:.4f}", int(r), int(d)]
        for t, s, r, d in zip(curve.times, curve.survival,
                              curve.at_risk, curve.events)
    ]


def _group_outcomes(matched: Cohort, mask: np.ndarray, out: Path, label: str):
    """KM per received arm within one recommendation group, plus log-rank."""
    times = matched.times()
    events = matched.events()
    treatments = matched.treatments()
    entry = {"n": int(mask.sum())}
    artifacts = []
    for arm, arm_name in ((0, "control"), (1, "treated")):
        sub = mask & (treatments == arm)
        entry[f"n_received_{arm_name}"] = int(sub.sum())
        if sub.any():
            fname = f"km_{label}_{arm_name}.csv"
            with open(out / fname, "w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh)
                writer.writerow(["time", "survival", "at_risk", "events"])
                writer.writerows(_km_rows(times[sub], events[sub]))
            artifacts.append(fname)
            curve = survival_stats.km_curve(times[sub], events[sub])
            med = survival_stats.median_survival(curve)
            entry[f"median_{arm_name}"] = med
    m0 = mask & (treatments == 0)
    m1 = mask & (treatments == 1)
    if m0.any() and m1.any() and events[mask].sum() > 0:
        chi2, p = survival_stats.logrank(
            times[m0], events[m0], times[m1], events[m1])
        entry["logrank_chi2"] = chi2
        entry["logrank_p"] = p
    else:
        entry["logrank_chi2"] = None
        entry["logrank_p"] = None
    return entry, artifacts


def _stage_validate(config: PipelineConfig, out: Path):
    _require(out, "eligible.csv", "matches.csv", "rewards_constrained.csv",
             "tree.json")
    matched = _matched_cohort(config, out)
    matrix = _load_rewards(out, "rewards_constrained.csv")
    tree = _tree_from_artifact(out)
    X = matched.covariate_matrix()
    arms, leaf_ids = policy_tree.assign(tree, X)

    subgroups = policy_tree.subgroup_report(
        tree, matched, matrix, config.min_effect)

    artifacts = ["validation.json"]
    groups = {}
    for label, mask in (("recommended", arms == 1),
                        ("advised_against", arms == 0)):
        if mask.any():
            entry, files = _group_outcomes(matched, mask, out, label)
            groups[label] = entry
            artifacts.extend(files)
        else:
            groups[label] = {"n": 0}

    balance = {"test": "welch-t", "scores": {}}
    names = config.schema.names
    if all(f in names for f in CLINICAL_SCORE_FIELDS):
        cols = {f: names.index(f) for f in CLINICAL_SCORE_FIELDS}
        # score inputs are defined on nonnegative measurements; clamp any
        # stray negative continuous values rather than failing the audit
        inputs = [
            survival_stats.RiskScoreInput(
                node_positive=bool(row[cols["node_positive"]]),
                dfi_months=max(0.0, float(row[cols["dfi_months"]])),
                n_tumors=max(0, int(row[cols["n_tumors"]])),
                max_size_cm=max(0.0, float(row[cols["max_size_cm"]])),
                cea_ng_ml=max(0.0, float(row[cols["cea_ng_ml"]])),
                kras_mutated=bool(row[cols["kras_mutated"]]),
            )
            for row in X
        ]
        for score_name, fn in (("crs", survival_stats.crs_score),
                               ("game", survival_stats.game_score)):
            values = [fn(inp) for inp in inputs]
            audit = survival_stats.node_balance_audit(
                leaf_ids, matched.treatments(), values)
            balance["scores"][score_name] = {str(k): v for k, v in audit.items()}
    else:
        balance["scores"] = {}
        balance["skipped"] = "clinical score covariates not present in schema"

    _write_json(out / "validation.json", {
        "subgroups": {str(k): v for k, v in subgroups.items()},
        "min_effect": config.min_effect,
        "groups": groups,
        "balance": balance,
    })
    return artifacts


_STAGE_FUNCS = {
    "filter": _stage_filter,
    "stratify": _stage_stratify,
    "match": _stage_match,
    "tune": _stage_tune,
    "constrain": _stage_constrain,
    "tree": _stage_tree,
    "validate": _stage_validate,
}


# --- orchestration ----------------------------------------------------------

def _config_digest(config: PipelineConfig) -> str:
    doc = json.dumps(config.describe(), sort_keys=True)
    return hashlib.sha256(doc.encode("utf-8")).hexdigest()


def _verify_stage(out: Path, entry: dict) -> None:
    for name, digest in entry["artifacts"].items():
        path = out / name
        if not path.exists():
            raise ArtifactError(
                f"stage {entry['name']}: artifact {name} missing; "
                f"delete manifest.json or rerun from that stage")
        if _sha256(path) != digest:
            raise ArtifactError(
                f"stage {entry['name']}: artifact {name} does not match its "
                f"recorded hash (tampered or regenerated out of band)")


def run_pipeline(config: PipelineConfig, out_dir,
                 until: str | None = None) -> dict:
    """Run all stages (or up to ``until``), resuming from intact artifacts.

    Returns the manifest dict; ``manifest.json`` is rewritten after every
    completed stage so a failed run keeps its partial artifacts.
    """
    if until is not None and until not in STAGES:
        raise ConfigError(f"unknown stage {until!r}; expected one of {STAGES}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest_path = out / "manifest.json"
    digest = _config_digest(config)

    completed = []
    if manifest_path.exists():
        previous = _read_json(manifest_path)
        if previous.get("config_digest") == digest:
            by_name = {e["name"]: e for e in previous.get("stages", [])}
            for name in STAGES:  # completed stages must form a prefix
                if name not in by_name:
                    break
                _verify_stage(out, by_name[name])
                completed.append(by_name[name])

    manifest = {
        "config_digest": digest,
        "seed": config.seed,
        "stages": completed,
    }
    done = {e["name"] for e in completed}
    for name in STAGES:
        if name not in done:
            try:
                files = _STAGE_FUNCS[name](config, out)
            except Exception as exc:
                exc.stage = name
                raise
            manifest["stages"].append({
                "name": name,
                "artifacts": {f: _sha256(out / f) for f in files},
            })
            _write_json(manifest_path, manifest)
        if name == until:
            break
    _write_json(manifest_path, manifest)
    return manifest


# --- report bundle ----------------------------------------------------------

def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def report(run_dir) -> Path:
    """Assemble the report bundle from a run directory's artifacts."""
    out = Path(run_dir)
    manifest_path = out / "manifest.json"
    if not manifest_path.exists():
        raise ArtifactError(f"{out}: no manifest.json; run the pipeline first")
    manifest = _read_json(manifest_path)
    done = [e["name"] for e in manifest.get("stages", [])]
    needed = {"match": "match.json", "tune": "tune.json",
              "tree": "tree.json", "validate": "validation.json"}
    missing = [stage for stage in needed if stage not in done]
    if missing:
        raise ArtifactError(
            f"report needs completed stages {missing}; rerun them first")

    rep = out / "report"
    rep.mkdir(exist_ok=True)

    match = _read_json(out / "match.json")
    tune = _read_json(out / "tune.json")
    validation = _read_json(out / "validation.json")

    targets = match["targets"]
    rows = [
        ["event_free_treated", targets["mu0"],
         1.0 - match["achieved"]["mean_risk_treated"]],
        ["event_free_untreated", targets["mu0"],
         1.0 - match["achieved"]["mean_risk_untreated"]],
    ]
    for name, (a0, a1) in sorted(targets["covariate_targets"].items()):
        rows.append([f"{name}_treated", a1,
                     match["achieved"]["covariate_means_treated"][name]])
        rows.append([f"{name}_untreated", a0,
                     match["achieved"]["covariate_means_untreated"][name]])
    _write_csv(rep / "achieved_vs_target.csv",
               ["metric", "target", "achieved"], rows)

    trace_rows = []
    for arm in sorted(tune.get("traces", {})):
        tr = tune["traces"][arm]
        for i, (rho, hbar, resid) in enumerate(zip(
                tr["rho_sequence"], tr["hbar_sequence"], tr["residuals"])):
            trace_rows.append([arm, i, rho, hbar, resid])
    _write_csv(rep / "tuning_trace.csv",
               ["arm", "step", "rho", "hbar", "residual"], trace_rows)

    for name in ("tree.json", "tree.txt"):
        (rep / name).write_text((out / name).read_text(encoding="utf-8"),
                                encoding="utf-8")
    for km in sorted(out.glob("km_*.csv")):
        (rep / km.name).write_text(km.read_text(encoding="utf-8"),
                                   encoding="utf-8")

    logrank_rows = []
    for label in ("recommended", "advised_against"):
        g = validation["groups"].get(label, {})
        logrank_rows.append([
            label, g.get("n", 0),
            g.get("n_received_treated", 0), g.get("n_received_control", 0),
            g.get("logrank_chi2"), g.get("logrank_p"),
            g.get("median_treated"), g.get("median_control"),
        ])
    _write_csv(rep / "logrank.csv",
               ["group", "n", "n_received_treated", "n_received_control",
                "chi2", "p", "median_treated", "median_control"],
               logrank_rows)

    balance_rows = []
    for score_name, leaves in sorted(validation["balance"]["scores"].items()):
        for leaf in sorted(leaves, key=int):
            e = leaves[leaf]
            balance_rows.append([score_name, leaf, e["n0"], e["n1"],
                                 e["mean0"], e["mean1"], e["p"]])
    _write_csv(rep / "balance.csv",
               ["score", "leaf", "n_control", "n_treated",
                "mean_control", "mean_treated", "p"],
               balance_rows)

    subgroup_rows = []
    for leaf in sorted(validation["subgroups"], key=int):
        e = validation["subgroups"][leaf]
        subgroup_rows.append([
            leaf, e["recommended_treatment"], e["n"],
            e["n_received_control"], e["n_received_treatment"],
            e["mean_reward_control"], e["mean_reward_treatment"],
            e["effect"], e["flagged"],
        ])
    _write_csv(rep / "subgroups.csv",
               ["leaf", "recommended_treatment", "n", "n_received_control",
                "n_received_treatment", "mean_reward_control",
                "mean_reward_treatment", "effect", "flagged"],
               subgroup_rows)
    return rep
