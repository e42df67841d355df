"""Stage orchestration: validate, index, generate, judge, metrics, report."""

from __future__ import annotations

import configparser
import logging
import threading
from dataclasses import asdict, dataclass, field, fields, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

from ._io import atomic_write_text, canonical_json, read_json, sha256_hex, write_json
from .chunking import ChunkingConfig
from .corpus import (DEFAULT_TOPICS, CorpusError, Handbook, Question, ValidationError, build_routing,
                     load_center_map, load_corpus, load_questions)
from .gateway import Gateway, ModelConfig, make_gateway
from .generation import load_answers, run_generation
from .judge import ComparisonMatrix, build_matrix, load_comparisons, run_judging, write_matrices
from .metrics import compute_metrics
from .prompts import load_prompt
from .reporting import HeatmapSpec, render_heatmap, render_tables
from .retrieval import HandbookIndex, RetrievalConfig, ensure_index, hybrid_search

logger = logging.getLogger(__name__)

STAGES = ("validate", "index", "generate", "judge", "metrics", "report")
OUTPUT_DIRS = ("answers", "comparisons", "matrices", "metrics", "reports", "figures")
FIXTURE_DIR = Path(__file__).resolve().parent / "fixtures" / "synthetic"


class StageError(RuntimeError):
    pass


class InputValidationError(RuntimeError):
    pass


@dataclass
class RunConfig:
    corpus_dir: Path = FIXTURE_DIR / "handbooks"
    questions_path: Path = FIXTURE_DIR / "questions.json"
    output_dir: Path = Path("out")
    run_name: str = "default"
    center_map: Path | None = None
    chunking: ChunkingConfig = field(default_factory=ChunkingConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    models: ModelConfig = field(default_factory=ModelConfig)
    workers: int = 4
    max_in_flight: int = 4
    strict: bool = False
    mock: bool = False
    cache: bool = True
    heatmaps: bool = True
    topics: tuple[str, ...] | None = DEFAULT_TOPICS
    stages: tuple[str, ...] = STAGES

    @property
    def run_dir(self) -> Path:
        return Path(self.output_dir) / self.run_name

    def hash_payload(self) -> dict:
        """Everything that changes the content of emitted artifacts."""
        return {
            "chunking": asdict(self.chunking),
            "retrieval": asdict(self.retrieval),
            "models": {k: getattr(self.models, k) for k in
                       ("chat_model", "embed_model", "rerank_model", "rerank_mode")},
            "prompts": {name: load_prompt(name).digest for name in ("generate", "absence", "judge")},
            "mock": self.mock,
            "topics": list(self.topics) if self.topics is not None else None,
        }

    def config_hash(self) -> str:
        return sha256_hex(canonical_json(self.hash_payload()))[:16]


def _coerce(kind: type, raw: str):
    if kind is bool:
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    return raw


def _section_into(obj, section: configparser.SectionProxy | None):
    if section is None:
        return obj
    updates = {}
    for f in fields(obj):
        if f.name in section:
            default = getattr(obj, f.name)
            kind = type(default) if default is not None else int
            updates[f.name] = _coerce(kind, section[f.name])
    return replace(obj, **updates)


def load_run_config(path: Path | str) -> RunConfig:
    """Read an INI-style run config. Relative paths resolve against the file's directory."""
    path = Path(path)
    cp = configparser.ConfigParser()
    with open(path, encoding="utf-8") as fh:
        cp.read_file(fh)
    base = path.parent
    cfg = RunConfig()
    run = cp["run"] if cp.has_section("run") else {}

    def p(key: str, default):
        return (base / run[key]) if key in run and run[key].strip() else default

    cfg.corpus_dir = p("corpus", cfg.corpus_dir)
    cfg.questions_path = p("questions", cfg.questions_path)
    cfg.output_dir = p("output", cfg.output_dir)
    cfg.center_map = p("center_map", None)
    if "name" in run:
        cfg.run_name = run["name"]
    for key in ("strict", "mock", "cache", "heatmaps"):
        if key in run:
            setattr(cfg, key, _coerce(bool, run[key]))
    if "topics" in run:
        raw = run["topics"].strip()
        cfg.topics = None if raw.lower() in ("", "any", "none") else tuple(
            t.strip() for t in raw.split("\n") if t.strip())
    cfg.chunking = _section_into(cfg.chunking, cp["chunking"] if cp.has_section("chunking") else None)
    cfg.retrieval = _section_into(cfg.retrieval, cp["retrieval"] if cp.has_section("retrieval") else None)
    cfg.models = _section_into(cfg.models, cp["models"] if cp.has_section("models") else None)
    if cp.has_section("concurrency"):
        conc = cp["concurrency"]
        cfg.workers = int(conc.get("workers", cfg.workers))
        cfg.max_in_flight = int(conc.get("max_in_flight", cfg.max_in_flight))
    return cfg


class IndexStore:
    """Lazily loads (or builds) per-handbook indexes under ``<run>/index``."""

    def __init__(self, cfg: RunConfig, handbooks: dict[str, Handbook], gateway: Gateway) -> None:
        self.cfg = cfg
        self.handbooks = handbooks
        self.gateway = gateway
        self._cache: dict[str, HandbookIndex] = {}
        self._lock = threading.Lock()
        self.built = 0
        self.reused = 0

    def get(self, hid: str) -> HandbookIndex:
        with self._lock:
            if hid not in self._cache:
                idx, built = ensure_index(self.handbooks[hid], self.cfg.run_dir / "index" / hid,
                                          self.gateway.embed, self.gateway.models.embed_model,
                                          self.cfg.chunking, self.cfg.retrieval)
                self._cache[hid] = idx
                self.built += built
                self.reused += not built
            return self._cache[hid]

    def retrieve(self, q: Question, hid: str):
        return hybrid_search(q, self.get(hid), self.cfg.retrieval, self.gateway.embed, self.gateway.score_pairs)


def _check_hash(kind: str, stamped: str, expected: str) -> None:
    if stamped != expected:
        raise StageError(f"{kind} was produced under config {stamped!r}, current config is {expected!r}")


def _load_inputs(cfg: RunConfig, errors: list[ValidationError]):
    center_map = load_center_map(cfg.center_map) if cfg.center_map else None
    handbooks = load_corpus(cfg.corpus_dir, center_map=center_map, errors=errors)
    questions = load_questions(cfg.questions_path, topics=cfg.topics)
    return handbooks, questions


def run_pipeline(cfg: RunConfig, gateway: Gateway | None = None) -> dict[str, Any]:
    """Run the selected stages in order and return the run report.

    ``report["exit_code"]`` is 0 on success, 1 on input validation failure,
    and 2 when a stage failed (completed outputs are left intact).
    """
    unknown = [s for s in cfg.stages if s not in STAGES]
    if unknown:
        raise ValueError(f"unknown stages: {unknown}")
    run_dir = cfg.run_dir
    for d in OUTPUT_DIRS:
        (run_dir / d).mkdir(parents=True, exist_ok=True)
    meta = run_dir / "_meta"
    config_hash = cfg.config_hash()
    report: dict[str, Any] = {"config_hash": config_hash, "stages": {}, "exit_code": 0,
                              "started_at": datetime.now(timezone.utc).isoformat()}
    write_json(meta / "config.json", {"config_hash": config_hash, **cfg.hash_payload()})

    errors: list[ValidationError] = []
    try:
        handbooks, questions = _load_inputs(cfg, errors)
    except (ValidationError, CorpusError, OSError) as exc:
        logger.error("input validation failed: %s", exc)
        report["stages"]["validate"] = {"ok": False, "error": str(exc)}
        report["exit_code"] = 1
        return _finish(report, meta, gateway)
    plan = build_routing(questions, handbooks)
    qmap = {q.id: q for q in questions}
    hmap = {h.id: h for h in handbooks}

    if gateway is None and any(s in cfg.stages for s in ("index", "generate", "judge")):
        gateway = make_gateway(cfg.models, mock=cfg.mock, max_in_flight=cfg.max_in_flight,
                               cache_dir=(run_dir / "cache") if cfg.cache and not cfg.mock else None)

    for stage in STAGES:
        if stage not in cfg.stages:
            continue
        logger.info("stage %s", stage)
        try:
            if stage == "validate":
                result = {"ok": not errors, "handbooks": len(handbooks), "questions": len(questions),
                          "pairs": len(plan), "organ_pairs": plan.organ_counts,
                          "errors": [str(e) for e in errors]}
                report["stages"][stage] = result
                if errors and cfg.strict:
                    report["exit_code"] = 1
                    break
                continue
            report["stages"][stage] = _run_stage(stage, cfg, plan, qmap, hmap, gateway, config_hash)
        except Exception as exc:  # a stage failure stops later stages only
            logger.exception("stage %s failed", stage)
            report["stages"][stage] = {"ok": False, "error": f"{type(exc).__name__}: {exc}"}
            report["exit_code"] = 2
            break
    return _finish(report, meta, gateway)


def _finish(report: dict, meta: Path, gateway: Gateway | None) -> dict:
    if gateway is not None:
        report["gateway"] = gateway.stats.to_json()
    report["finished_at"] = datetime.now(timezone.utc).isoformat()
    write_json(meta / "run_report.json", report)
    return report


def _run_stage(stage: str, cfg: RunConfig, plan, qmap, hmap, gateway, config_hash: str) -> dict:
    run_dir = cfg.run_dir
    answers_dir, comparisons_dir = run_dir / "answers", run_dir / "comparisons"

    if stage == "index":
        store = IndexStore(cfg, hmap, gateway)
        for hid in sorted(hmap):
            store.get(hid)
        return {"ok": True, "built": store.built, "skipped": store.reused, "total": len(hmap)}

    if stage == "generate":
        store = IndexStore(cfg, hmap, gateway)
        ledger = run_generation(plan, qmap, store.retrieve, gateway, answers_dir, config_hash=config_hash,
                                workers=cfg.workers, timestamps_path=run_dir / "_meta" / "timestamps.jsonl")
        out = {"ok": not ledger.failed, "total": len(plan), **ledger.to_json()}
        if ledger.failed and cfg.strict:
            raise StageError(f"{len(ledger.failed)} generation failure(s)")
        return out

    if stage == "judge":
        ledger = run_judging(plan, qmap, answers_dir, comparisons_dir, gateway,
                             config_hash=config_hash, workers=cfg.workers)
        write_matrices(plan, comparisons_dir, run_dir / "matrices", config_hash=config_hash, strict=cfg.strict)
        total = ledger.judged + ledger.short_circuited + ledger.skipped + ledger.errors + ledger.unresolved
        return {"ok": True, "total": total, **ledger.to_json()}

    if stage == "metrics":
        answers = load_answers(answers_dir, plan)
        for a in answers.values():
            _check_hash(f"answer {a.question_id}/{a.handbook_id}", a.config_hash, config_hash)
        comparisons = load_comparisons(comparisons_dir)
        for c in comparisons:
            _check_hash(f"comparison {c.question_id}/{c.handbook_a}__{c.handbook_b}", c.config_hash, config_hash)
        matrices = {qid: build_matrix(qid, [c for c in comparisons if c.question_id == qid],
                                      plan.handbooks_for(qid), strict=cfg.strict)
                    for qid in sorted(plan.by_question)}
        metrics = compute_metrics(list(qmap.values()), plan, answers, matrices, comparisons,
                                  config_hash=config_hash)
        doc = metrics.to_json()
        write_json(run_dir / "metrics" / "metrics.json", doc)
        for name, table in render_tables(doc).items():
            atomic_write_text(run_dir / "metrics" / f"{name}.csv", table.to_csv())
        return {"ok": True, "questions": len(matrices), "comparisons": len(comparisons),
                "excluded": metrics.excluded}

    if stage == "report":
        metrics_path = run_dir / "metrics" / "metrics.json"
        if not metrics_path.exists():
            raise StageError("metrics stage has not produced metrics/metrics.json")
        doc = read_json(metrics_path)
        _check_hash("metrics", doc.get("config_hash", ""), config_hash)
        tables = render_tables(doc)
        for name, table in tables.items():
            atomic_write_text(run_dir / "reports" / f"{name}.csv", table.to_csv())
            atomic_write_text(run_dir / "reports" / f"{name}.md", table.to_markdown())
        n_fig = 0
        if cfg.heatmaps:
            for path in sorted((run_dir / "matrices").glob("*.json")):
                raw = read_json(path)
                _check_hash(f"matrix {path.stem}", raw.get("config_hash", ""), config_hash)
                m = ComparisonMatrix.from_json(raw)
                atomic_write_text(run_dir / "figures" / f"{m.question_id}.svg",
                                  render_heatmap(m, HeatmapSpec(question_id=m.question_id)))
                n_fig += 1
        return {"ok": True, "tables": sorted(tables), "figures": n_fig}

    raise ValueError(stage)
