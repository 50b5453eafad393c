"""Factorial study orchestration: generators x scenarios x schemes x methods.

Determinism contract: every replicate's seed is a pure function of
(master_seed, scenario index, replicate index) via splitmix64 mixing, and
aggregation sums integer rejection counts, so the emitted table is
byte-identical regardless of worker count or execution order.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .datagen import (
    DiscretizedMvnParams,
    EffectScenario,
    IrtPopulationParams,
    ReferenceConfig,
    build_synthetic_reference,
    builtin_scenarios,
    gen_bootstrap,
    gen_discretized_mvn,
    gen_irt_longitudinal,
)
from .errors import NumericalError, ValidationError
from .irt import GrModel, LinearLatentApprox, eap_scores, fit_grm, fit_linear_latent_approx
from .marginal import estimate_corr, fit_marginals
from .numkit import RngStream, mix64, mix64_array, _GOLDEN, _MASK64
from .procedures import (
    METHODS,
    OmnibusCalibration,
    get_omnibus_calibration,
    test_bonferroni,
    test_irt,
    test_lm_approx,
    test_maxt,
    test_obrien,
    test_omnibus,
    test_omnibus_domains,
    test_simes_hommel,
    test_sum_score,
)
from .scales import DOMAINS, ItemDataset, ScoringScheme, ensure_scheme, get_scheme

WORKER_ENV_VAR = "PSPRSIM_WORKERS"
GENERATORS = ("mvn", "bootstrap", "irt")

_FITS_METHODS = frozenset({"OLS", "GLS", "GLS-drop", "Bonf", "Simes", "Omnibus", "MaxT"})
_CORR_METHODS = frozenset({"OLS", "GLS", "GLS-drop", "MaxT"})


def derive_replicate_seed(master: int, scenario_id: int, rep: int) -> int:
    """Collision-resistant 64-bit seed for one replicate (splitmix64 chain)."""
    z = mix64((master + _GOLDEN * (scenario_id + 1)) & _MASK64)
    return mix64((z + _GOLDEN * (rep + 1)) & _MASK64)


def derive_replicate_seeds(master: int, scenario_id: int, reps: np.ndarray) -> np.ndarray:
    """Vectorized derive_replicate_seed over an array of replicate indices."""
    with np.errstate(over="ignore"):
        z = mix64_array(
            np.uint64((master + _GOLDEN * (scenario_id + 1)) & _MASK64)
            + np.zeros(len(reps), dtype=np.uint64)
        )
        z += np.uint64(_GOLDEN) * (np.asarray(reps, dtype=np.uint64) + np.uint64(1))
    return mix64_array(z)


@dataclass
class StudyPlan:
    """Everything needed to reproduce one study run."""

    generator: str
    scenarios: list = field(default_factory=lambda: ["d0"])
    schemes: list = field(default_factory=lambda: ["original", "fda"])
    methods: list = field(default_factory=lambda: list(METHODS))
    n_per_group: int = 70
    n_reps: int = 10_000
    alpha: float = 0.025
    master_seed: int = 202_400
    reference_seed: int = 1
    calibration_reps: int = 100_000
    calibration_seed: int = 7
    maxt_tol: float = 1e-4
    bootstrap_replace: bool = False
    irt_population: IrtPopulationParams = field(default_factory=IrtPopulationParams)

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise ValidationError(f"unknown generator {self.generator!r}")
        if self.n_reps < 100:
            raise ValidationError(f"n_reps must be >= 100, got {self.n_reps}")
        if not 0.0 < self.alpha < 0.5:
            raise ValidationError(f"alpha must lie in (0, 0.5), got {self.alpha}")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ValidationError(f"unknown methods {bad}; known: {list(METHODS)}")
        for s in self.schemes:
            get_scheme(s)

    def resolve_scenarios(self) -> list[EffectScenario]:
        known = builtin_scenarios()
        out = []
        for entry in self.scenarios:
            if isinstance(entry, str):
                if entry not in known:
                    raise ValidationError(
                        f"unknown scenario label {entry!r}; known: {sorted(known)}"
                    )
                out.append(known[entry])
            elif isinstance(entry, dict) and "d" in entry:
                out.append(EffectScenario("item-shift", entry["label"],
                                          d=np.asarray(entry["d"], dtype=float)))
            elif isinstance(entry, dict) and "rho" in entry:
                out.append(EffectScenario("slope-ratio", entry["label"],
                                          rho=float(entry["rho"])))
            else:
                raise ValidationError(f"bad scenario entry {entry!r}")
        return out

    def to_doc(self) -> dict:
        doc = asdict(self)
        doc["irt_population"] = asdict(self.irt_population)
        return doc

    @classmethod
    def from_doc(cls, doc: dict) -> "StudyPlan":
        doc = dict(doc)
        pop = doc.pop("irt_population", None)
        plan = cls(**doc)
        if pop is not None:
            plan = replace(plan, irt_population=IrtPopulationParams(**pop))
        return plan

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_doc(), indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "StudyPlan":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"plan file {path} is not valid JSON: {exc}") from exc
        return cls.from_doc(doc)


@dataclass
class PowerRow:
    generator: str
    scenario: str
    scheme: str
    method: str
    rejection_rate: float
    mc_se: float
    n_reps: int
    n_failures: int = 0

    SORT_KEY = staticmethod(lambda r: (r.generator, r.scenario, r.scheme, r.method))


@dataclass
class PowerTable:
    rows: list[PowerRow] = field(default_factory=list)

    HEADER = "generator,scenario,scheme,method,rejection_rate,mc_se,n_reps,n_failures"

    def sorted(self) -> "PowerTable":
        return PowerTable(sorted(self.rows, key=PowerRow.SORT_KEY))

    def rate(self, scenario: str, scheme: str, method: str) -> float:
        for r in self.rows:
            if (r.scenario, r.scheme, r.method) == (scenario, scheme, method):
                return r.rejection_rate
        raise KeyError((scenario, scheme, method))

    def se(self, scenario: str, scheme: str, method: str) -> float:
        for r in self.rows:
            if (r.scenario, r.scheme, r.method) == (scenario, scheme, method):
                return r.mc_se
        raise KeyError((scenario, scheme, method))

    def to_csv_text(self) -> str:
        lines = [self.HEADER]
        for r in self.sorted().rows:
            lines.append(
                f"{r.generator},{r.scenario},{r.scheme},{r.method},"
                f"{r.rejection_rate!r},{r.mc_se!r},{r.n_reps},{r.n_failures}"
            )
        return "\n".join(lines) + "\n"

    def save_csv(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv_text(), encoding="utf-8")

    def to_doc(self) -> list[dict]:
        return [asdict(r) for r in self.sorted().rows]

    def save_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_doc(), indent=2), encoding="utf-8")


@dataclass
class StudyAuxiliaries:
    """Read-only objects shared by every replicate of a plan."""

    pool: ItemDataset
    mvn_params: DiscretizedMvnParams
    schemes: dict[str, ScoringScheme]
    grm: dict[str, GrModel]
    approx: dict[str, LinearLatentApprox]
    calib_items: OmnibusCalibration
    calib_domains: OmnibusCalibration


def prepare_auxiliaries(
    plan: StudyPlan,
    cache_dir: str | Path | None = None,
    reference_config: ReferenceConfig | None = None,
) -> StudyAuxiliaries:
    """Fit-once phase: reference pool, per-scheme models, omnibus tables."""
    pool = build_synthetic_reference(reference_config, RngStream(plan.reference_seed))
    scheme_tags = list(dict.fromkeys(["original", *plan.schemes]))
    schemes = {tag: get_scheme(tag) for tag in scheme_tags}
    grm: dict[str, GrModel] = {}
    approx: dict[str, LinearLatentApprox] = {}
    for tag, scheme in schemes.items():
        data = ensure_scheme(pool, scheme)
        model = fit_grm(data)
        thetas = eap_scores(model, data.flatten_visits())
        grm[tag] = model
        approx[tag] = fit_linear_latent_approx(data, thetas)
    calib_items = get_omnibus_calibration(
        cache_dir, m=10, reps=plan.calibration_reps, seed=plan.calibration_seed
    )
    calib_domains = get_omnibus_calibration(
        cache_dir, m=len(DOMAINS), reps=plan.calibration_reps, seed=plan.calibration_seed
    )
    return StudyAuxiliaries(
        pool=pool,
        mvn_params=DiscretizedMvnParams.estimate(pool),
        schemes=schemes,
        grm=grm,
        approx=approx,
        calib_items=calib_items,
        calib_domains=calib_domains,
    )


def _generate(plan: StudyPlan, scenario: EffectScenario, aux: StudyAuxiliaries,
              rng: RngStream) -> ItemDataset:
    if plan.generator == "mvn":
        return gen_discretized_mvn(aux.mvn_params, scenario, plan.n_per_group, rng)
    if plan.generator == "bootstrap":
        return gen_bootstrap(aux.pool, scenario, plan.n_per_group, rng,
                             replace=plan.bootstrap_replace)
    if scenario.kind != "slope-ratio":
        raise ValidationError(
            f"the IRT generator needs a slope-ratio scenario, got {scenario.label!r}"
        )
    return gen_irt_longitudinal(plan.irt_population, aux.grm["original"],
                                scenario.rho, plan.n_per_group, rng)


def run_single_replicate(
    plan: StudyPlan,
    scenario: EffectScenario,
    scenario_id: int,
    rep: int,
    aux: StudyAuxiliaries,
):
    """One replicate: generate, rescore per scheme, run each method.

    Returns (rejected, failed, messages): int8 arrays of shape
    (n_schemes, n_methods) and a list of failure descriptions.
    """
    seed = derive_replicate_seed(plan.master_seed, scenario_id, rep)
    base = RngStream(seed)
    data0 = _generate(plan, scenario, aux, base.child(0))
    n_s, n_m = len(plan.schemes), len(plan.methods)
    rejected = np.zeros((n_s, n_m), dtype=np.int8)
    failed = np.zeros((n_s, n_m), dtype=np.int8)
    messages: list[str] = []
    for si, tag in enumerate(plan.schemes):
        data = ensure_scheme(data0, aux.schemes[tag])
        rng = base.child(1 + si)
        cache: dict[str, object] = {}

        def get_fits():
            if "fits" not in cache:
                cache["fits"] = fit_marginals(data)
            return cache["fits"]

        def get_corr():
            if "corr" not in cache:
                cache["corr"] = estimate_corr(data, get_fits())
            return cache["corr"]

        for mi, method in enumerate(plan.methods):
            try:
                if method == "SumS":
                    out = test_sum_score(data)
                elif method == "IRT":
                    out = test_irt(data, external_model=aux.grm[tag])
                elif method == "LM":
                    out = test_lm_approx(data, approx=aux.approx[tag])
                elif method in ("OLS", "GLS", "GLS-drop"):
                    out = test_obrien(data, variant=method,
                                      fits=get_fits(), corr=get_corr())
                elif method == "Bonf":
                    out = test_bonferroni(data, fits=get_fits())
                elif method == "Simes":
                    out = test_simes_hommel(data, fits=get_fits())
                elif method == "MaxT":
                    out = test_maxt(data, tol=plan.maxt_tol, rng=rng,
                                    fits=get_fits(), corr=get_corr())
                elif method == "Omnibus":
                    out = test_omnibus(get_fits().p_vector, aux.calib_items)
                elif method == "Omnibus-dom":
                    out = test_omnibus_domains(data, calib=aux.calib_domains)
                else:  # pragma: no cover - plan validation rejects these
                    raise ValidationError(f"unknown method {method!r}")
            except (NumericalError, np.linalg.LinAlgError) as exc:
                # conservative: failures never count as rejections
                failed[si, mi] = 1
                if len(messages) < 20:
                    messages.append(f"{method}/{tag}/rep={rep}: {exc}")
                continue
            rejected[si, mi] = 1 if out.p_one_sided <= plan.alpha else 0
    return rejected, failed, messages


_WORKER: dict = {}


def _init_worker(plan_doc: dict, aux: StudyAuxiliaries):
    # keep linear algebra single-threaded inside workers
    os.environ.setdefault("OMP_NUM_THREADS", "1")
    _WORKER["plan"] = StudyPlan.from_doc(plan_doc)
    _WORKER["aux"] = aux


def _run_chunk(args):
    scenario_doc, scenario_id, start, stop = args
    plan: StudyPlan = _WORKER["plan"]
    aux: StudyAuxiliaries = _WORKER["aux"]
    scenario = _scenario_from_doc(scenario_doc)
    n_s, n_m = len(plan.schemes), len(plan.methods)
    rej = np.zeros((n_s, n_m), dtype=np.int64)
    fail = np.zeros((n_s, n_m), dtype=np.int64)
    msgs: list[str] = []
    for rep in range(start, stop):
        r, f, m = run_single_replicate(plan, scenario, scenario_id, rep, aux)
        rej += r
        fail += f
        if len(msgs) < 20:
            msgs.extend(m[: 20 - len(msgs)])
    return rej, fail, msgs


def _scenario_doc(s: EffectScenario) -> dict:
    if s.kind == "item-shift":
        return {"kind": s.kind, "label": s.label, "d": s.d.tolist()}
    return {"kind": s.kind, "label": s.label, "rho": s.rho}


def _scenario_from_doc(doc: dict) -> EffectScenario:
    if doc["kind"] == "item-shift":
        return EffectScenario("item-shift", doc["label"], d=np.asarray(doc["d"]))
    return EffectScenario("slope-ratio", doc["label"], rho=doc["rho"])


def resolve_workers(workers: int | None = None) -> int:
    if workers is not None:
        return max(1, int(workers))
    env = os.environ.get(WORKER_ENV_VAR)
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def run_scenario(
    plan: StudyPlan,
    scenario: EffectScenario,
    scenario_id: int,
    aux: StudyAuxiliaries,
    workers: int | None = None,
) -> list[PowerRow]:
    """All replicates of one scenario, aggregated into PowerTable rows."""
    workers = resolve_workers(workers)
    n_s, n_m = len(plan.schemes), len(plan.methods)
    rej = np.zeros((n_s, n_m), dtype=np.int64)
    fail = np.zeros((n_s, n_m), dtype=np.int64)
    msgs: list[str] = []
    sdoc = _scenario_doc(scenario)
    if workers == 1:
        _init_worker(plan.to_doc(), aux)
        r, f, m = _run_chunk((sdoc, scenario_id, 0, plan.n_reps))
        rej, fail, msgs = r, f, m
    else:
        chunk = max(1, -(-plan.n_reps // (workers * 4)))
        tasks = [
            (sdoc, scenario_id, start, min(start + chunk, plan.n_reps))
            for start in range(0, plan.n_reps, chunk)
        ]
        with ProcessPoolExecutor(
            max_workers=workers, initializer=_init_worker,
            initargs=(plan.to_doc(), aux)
        ) as pool:
            for r, f, m in pool.map(_run_chunk, tasks):
                rej += r
                fail += f
                if len(msgs) < 20:
                    msgs.extend(m[: 20 - len(msgs)])

    rows = []
    for si, scheme in enumerate(plan.schemes):
        for mi, method in enumerate(plan.methods):
            if fail[si, mi] > 0.01 * plan.n_reps:
                raise NumericalError(
                    f"{method}/{scheme} failed on {fail[si, mi]}/{plan.n_reps} "
                    f"replicates (> 1%); first errors: {msgs[:5]}"
                )
            rate = rej[si, mi] / plan.n_reps
            rows.append(
                PowerRow(
                    generator=plan.generator,
                    scenario=scenario.label,
                    scheme=scheme,
                    method=method,
                    rejection_rate=float(rate),
                    mc_se=float(np.sqrt(rate * (1.0 - rate) / plan.n_reps)),
                    n_reps=plan.n_reps,
                    n_failures=int(fail[si, mi]),
                )
            )
    return rows


def run_study(
    plan: StudyPlan,
    aux: StudyAuxiliaries | None = None,
    workers: int | None = None,
    cache_dir: str | Path | None = None,
) -> PowerTable:
    """Run every scenario in the plan; rows come back in stable sorted order."""
    if aux is None:
        aux = prepare_auxiliaries(plan, cache_dir=cache_dir)
    table = PowerTable()
    for scenario_id, scenario in enumerate(plan.resolve_scenarios()):
        table.rows.extend(run_scenario(plan, scenario, scenario_id, aux, workers))
    return table.sorted()
