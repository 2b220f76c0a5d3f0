"""End-to-end orchestration over a run directory.

A run directory holds everything one configuration produces::

    run/
      config.txt            key = value pipeline config (the source of truth)
      model.txt             model hyper-parameters
      data/                 corpus, held-out split, pairs, quadruples, balance report
      checkpoints/          one .ckpt per finished step
      reports/              JSON reports plus line-delimited eval records
      manifests/            one manifest per command: config hash, seeds, versions, output digests
      timing.json           wall-clock seconds per training step (not reproducible by nature)

Every step checks that the artifacts it builds on exist and raises
``DependencyError`` naming the missing step otherwise.
"""
from __future__ import annotations

import hashlib
import json
import platform
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import config_hash, dump_kv, read_kv
from .errors import ArgumentError, DataError, DependencyError
from .evaluation import EvalReport, evaluate_ter, vocode
from .flow_matching import CFMConfig, CFMModel, cfm_train
from .model.config import ModelConfig, config_for_world
from .model.network import DualBranchModel
from .numerics.params import load_checkpoint, save_checkpoint
from .streaming import (chunked_vocode, finalize, latency_report, open_session, push_text, stream_tokens,
                        synthesize_offline)
from .training import (StageSpec, assemble_all, full_finetune_baseline, pretrain_text,
                       text_perplexity, text_probe_logits, train_align_step1, train_align_step2,
                       train_generate_step1, train_generate_step2)
from .toy_world import (AlignmentPair, Quadruple, ToyUtterance, WorldConfig, build_alignment_pairs,
                        build_quadruples, gen_corpus, heldout_split, load_codec, render_speech, text_vocab)
from .toy_world.io import read_jsonl, write_frames, write_jsonl


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    corpus_size: int = 4000        # utterances; 10% are held out by seeded hash
    align_size: int = 0            # training utterances that feed Stage I pairs; 0 = all of them
    base_dialect: int = 0
    pretrain_epochs: int = 4
    align1_epochs: int = 12
    align2_epochs: int = 12
    generate1_epochs: int = 12
    generate2_epochs: int = 24
    baseline_epochs: int = 4
    batch_size: int = 16
    lr: float = 2e-3
    cfm_utterances: int = 400
    cfm_steps: int = 5000
    cfm_sample_steps: int = 16
    vocoder: str = "cfm"           # "cfm" or "codebook" for the eval frames
    eval_items: int = 200          # held-out utterances scored by `eval`
    forget_eval_items: int = 40    # per arm in the forgetting report
    probe_items: int = 32
    model: dict = field(default_factory=dict)   # ModelConfig overrides, keys "model.<name>"

    def __post_init__(self):
        if self.corpus_size < 20 or self.align_size < 0:
            raise ArgumentError("corpus_size must be >= 20 and align_size >= 0")
        if self.vocoder not in ("cfm", "codebook"):
            raise ArgumentError("vocoder must be 'cfm' or 'codebook'")
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name.endswith(("_epochs", "_items", "_steps", "_utterances")) and v < 1:
                raise ArgumentError(f"{f.name} must be positive")

    def to_kv(self) -> dict[str, str]:
        d = {k: str(v) for k, v in asdict(self).items() if k != "model"}
        d.update({f"model.{k}": str(v) for k, v in self.model.items()})
        return d

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "PipelineConfig":
        known = {f.name: f for f in fields(cls)}
        kw: dict = {}
        model: dict = {}
        for key, value in kv.items():
            if key.startswith("model."):
                model[key[len("model."):]] = value
                continue
            if key not in known or key == "model":
                raise ArgumentError(f"unknown config key {key!r}")
            default = known[key].default
            try:
                kw[key] = type(default)(value)
            except ValueError as exc:
                raise ArgumentError(f"config key {key!r}: cannot parse {value!r}") from exc
        if model:
            ModelConfig.from_dict(model)       # validate names and values early
        return cls(model=model, **kw)

    @classmethod
    def from_file(cls, path: str | Path, overrides: dict[str, str] | None = None) -> "PipelineConfig":
        kv = read_kv(path)
        kv.update(overrides or {})
        return cls.from_kv(kv)

    def with_(self, **kw) -> "PipelineConfig":
        return replace(self, **kw)

    def hash(self) -> str:
        return config_hash(self.to_kv())

    def world(self) -> WorldConfig:
        return WorldConfig()

    def model_config(self) -> ModelConfig:
        typed = ModelConfig.from_dict(self.model).to_dict() if self.model else {}
        kw = {"seed": self.seed}
        kw.update({k: typed[k] for k in self.model})
        return config_for_world(self.world(), **kw)


# ---------------------------------------------------------------- run directory

STEPS = ("pretrain", "align1", "align2", "generate1", "generate2", "baseline", "cfm")
PREREQ = {"pretrain": None, "align1": "pretrain", "align2": "align1", "generate1": "align2",
          "generate2": "generate1", "baseline": "align2", "cfm": None}


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


class Run:
    """Paths and loaders for one run directory."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.data = self.root / "data"
        self.ckpt = self.root / "checkpoints"
        self.reports = self.root / "reports"
        self.manifests = self.root / "manifests"

    def init(self, cfg: PipelineConfig) -> None:
        for d in (self.data, self.ckpt, self.reports, self.manifests):
            d.mkdir(parents=True, exist_ok=True)
        cfg_path = self.root / "config.txt"
        text = dump_kv(cfg.to_kv())
        if cfg_path.exists() and cfg_path.read_text(encoding="utf-8") != text:
            raise ArgumentError(f"{self.root} already holds a run with a different config")
        cfg_path.write_text(text, encoding="utf-8")
        (self.root / "model.txt").write_text(cfg.model_config().to_text(), encoding="utf-8")

    def config(self) -> PipelineConfig:
        path = self.root / "config.txt"
        if not path.exists():
            raise DependencyError(f"no run at {self.root}: run datagen first")
        return PipelineConfig.from_file(path)

    def checkpoint_path(self, step: str) -> Path:
        return self.ckpt / f"{step}.ckpt"

    def require(self, path: Path, step: str) -> Path:
        if not path.exists():
            raise DependencyError(f"missing {path}: run the '{step}' step first")
        return path

    def load_model(self, step: str, cfg: PipelineConfig, tied: bool = False) -> DualBranchModel:
        store = load_checkpoint(self.require(self.checkpoint_path(step), step))
        return DualBranchModel(cfg.model_config(), store, tied=tied)

    def load_cfm(self) -> CFMModel:
        store = load_checkpoint(self.require(self.checkpoint_path("cfm"), "cfm"))
        world = self.config().world()
        return CFMModel(CFMConfig(F=world.F, V_s=world.V_s, seed=self.config().seed), store)

    def _records(self, name: str) -> list[dict]:
        return list(read_jsonl(self.require(self.data / name, "datagen")))

    def utterances(self, name: str) -> list[ToyUtterance]:
        return [ToyUtterance.from_record(r) for r in self._records(name)]

    def pairs(self, name: str, world: WorldConfig) -> list[AlignmentPair]:
        return [AlignmentPair.from_record(r, world) for r in self._records(name)]

    def quadruples(self, name: str, world: WorldConfig) -> list[Quadruple]:
        return [Quadruple.from_record(r, world) for r in self._records(name)]

    def log_time(self, step: str, seconds: float) -> None:
        """Wall-clock seconds per step; the one file in a run that is not reproducible."""
        path = self.root / "timing.json"
        times = json.loads(path.read_text()) if path.exists() else {}
        times[step] = round(seconds, 1)
        _write_json(path, times)

    def manifest(self, command: str, cfg: PipelineConfig, outputs: list[Path], extra: dict | None = None) -> Path:
        """Config hash, seeds, versions and a digest of every output file."""
        rec = {
            "command": command, "config": cfg.to_kv(), "config_hash": cfg.hash(), "seed": cfg.seed,
            "versions": {"goat_tts": __version__, "python": platform.python_version(),
                         "numpy": np.__version__},
            "outputs": {str(p.relative_to(self.root)): _digest(p) for p in sorted(outputs)},
        }
        rec.update(extra or {})
        return _write_json(self.manifests / f"{command}.json", rec)


# ---------------------------------------------------------------- datagen

def datagen(cfg: PipelineConfig, root: str | Path) -> dict:
    """Corpus, held-out split, Stage I pairs, Stage II quadruples and a balance report."""
    run = Run(root)
    run.init(cfg)
    world = cfg.world()
    corpus = gen_corpus(cfg.seed, world, cfg.corpus_size)
    train, held = heldout_split(corpus, cfg.seed)
    if not train or not held:
        raise DataError("held-out split left one side empty; raise corpus_size")
    stage1 = train[:cfg.align_size] if cfg.align_size else train
    pairs_t = build_alignment_pairs(stage1, "transcript", world, cfg.seed)
    pairs_tts = build_alignment_pairs(stage1, "tts", world, cfg.seed + 1)
    pairs_held = build_alignment_pairs(held, "transcript", world, cfg.seed)
    quads, qrep = build_quadruples(train, world)
    files = {
        "corpus.jsonl": [u.to_record() for u in corpus],
        "heldout.jsonl": [u.to_record() for u in held],
        "pairs_transcript.jsonl": [p.to_record() for p in pairs_t],
        "pairs_tts.jsonl": [p.to_record() for p in pairs_tts],
        "pairs_heldout.jsonl": [p.to_record() for p in pairs_held],
        "quadruples.jsonl": [q.to_record() for q in quads],
    }
    outputs = []
    for name, recs in files.items():
        write_jsonl(run.data / name, recs)
        outputs.append(run.data / name)

    def by(attr, items):
        out = {str(d): 0 for d in range(world.D if attr == "dialect" else world.E)}
        for it in items:
            out[str(getattr(it, attr))] += 1
        return out

    balance = {
        "utterances": len(corpus), "train": len(train), "heldout": len(held),
        "dialect": {"corpus": by("dialect", corpus), "pairs_transcript": by("dialect", pairs_t),
                    "pairs_tts": by("dialect", pairs_tts), "quadruples": by("dialect", quads)},
        "emotion": {"corpus": by("emotion", corpus), "pairs_tts": by("emotion", pairs_tts)},
        "quadruples": {"count": qrep.quadruples, "groups": qrep.groups, "skipped_groups": qrep.skipped_groups,
                       "skipped_utterances": qrep.skipped_utterances},
        "base_dialect_pairs": sum(p.dialect == cfg.base_dialect for p in pairs_t),
    }
    outputs.append(_write_json(run.data / "balance.json", balance))
    run.manifest("datagen", cfg, outputs)
    return balance


# ---------------------------------------------------------------- training

def _spec(cfg: PipelineConfig, stage: str, step: int, epochs: int, offset: int) -> StageSpec:
    return StageSpec(stage, step, epochs=epochs, batch_size=cfg.batch_size, lr=cfg.lr, seed=cfg.seed * 100 + offset)


def train(cfg: PipelineConfig, root: str | Path, step: str) -> dict:
    """Run one named step from the checkpoint of its prerequisite."""
    if step not in STEPS:
        raise ArgumentError(f"unknown step {step!r}; expected one of {', '.join(STEPS)}")
    run = Run(root)
    world = cfg.world()
    vocab = text_vocab(world)
    if step == "cfm":
        return _train_cfm(cfg, run, world)
    prereq = PREREQ[step]
    if prereq is None:
        model = DualBranchModel(cfg.model_config())
    else:
        model = run.load_model(prereq, cfg, tied=step == "baseline")
    if step == "pretrain":
        rep = pretrain_text(model, run.pairs("pairs_transcript.jsonl", world), vocab,
                            _spec(cfg, "pretrain", 0, cfg.pretrain_epochs, 0))
    elif step == "align1":
        base = [p for p in run.pairs("pairs_transcript.jsonl", world) if p.dialect == cfg.base_dialect]
        rep = train_align_step1(model, base, vocab, _spec(cfg, "align", 1, cfg.align1_epochs, 1))
    elif step == "align2":
        rep = train_align_step2(model, run.pairs("pairs_tts.jsonl", world), vocab,
                                _spec(cfg, "align", 2, cfg.align2_epochs, 2))
    elif step == "generate1":
        rep = train_generate_step1(model, run.quadruples("quadruples.jsonl", world), vocab,
                                   _spec(cfg, "generate", 1, cfg.generate1_epochs, 3), cfg.base_dialect)
    elif step == "generate2":
        rep = train_generate_step2(model, run.quadruples("quadruples.jsonl", world), vocab,
                                   _spec(cfg, "generate", 2, cfg.generate2_epochs, 4))
    else:
        rep = full_finetune_baseline(model, run.quadruples("quadruples.jsonl", world), vocab,
                                     _spec(cfg, "baseline", 0, cfg.baseline_epochs, 5))
    if not rep.freeze_ok:
        raise DataError(f"{step}: parameters outside the trainable set changed: {rep.changed}")
    ckpt = run.checkpoint_path(step)
    save_checkpoint(model.params, ckpt)
    record = rep.to_record()
    record["checkpoint_sha256"] = _digest(ckpt)
    report = _write_json(run.reports / f"train_{step}.json", record)
    run.manifest(f"train_{step}", cfg, [ckpt, report])
    run.log_time(step, rep.wall_time)
    return record


def _train_cfm(cfg: PipelineConfig, run: Run, world: WorldConfig) -> dict:
    codec = load_codec(world)
    data = []
    for u in run.utterances("corpus.jsonl")[:cfg.cfm_utterances]:
        frames = render_speech(u, world)
        data.append((codec.encode(frames), frames))
    model = CFMModel(CFMConfig(F=world.F, V_s=world.V_s, seed=cfg.seed))
    rep = cfm_train(model, data, steps=cfg.cfm_steps, seed=cfg.seed)
    ckpt = run.checkpoint_path("cfm")
    save_checkpoint(model.params, ckpt)
    record = rep.to_record()
    record["checkpoint_sha256"] = _digest(ckpt)
    report = _write_json(run.reports / "train_cfm.json", record)
    run.manifest("train_cfm", cfg, [ckpt, report])
    return record


def train_all(cfg: PipelineConfig, root: str | Path, with_baseline: bool = True, log=None) -> list[dict]:
    out = []
    for step in STEPS:
        if step == "baseline" and not with_baseline:
            continue
        rec = train(cfg, root, step)
        if log:
            log(f"{step}: {json.dumps({k: rec[k] for k in rec if k in ('epoch_loss', 'final_loss')})}")
        out.append(rec)
    return out


# ---------------------------------------------------------------- evaluation

def _vocoder(cfg: PipelineConfig, run: Run):
    return run.load_cfm() if cfg.vocoder == "cfm" else None


def _eval_model(cfg, run, model, utts) -> EvalReport:
    world = cfg.world()
    return evaluate_ter(model, utts, world, text_vocab(world), load_codec(world), _vocoder(cfg, run),
                        steps=cfg.cfm_sample_steps, seed=cfg.seed)


def evaluate(cfg: PipelineConfig, root: str | Path, step: str = "generate2", limit: int | None = None) -> dict:
    """Token error rate of a checkpoint on the held-out utterances (first ``eval_items`` by id)."""
    run = Run(root)
    model = run.load_model(step, cfg, tied=step == "baseline")
    held = sorted(run.utterances("heldout.jsonl"), key=lambda u: u.uid)[:limit or cfg.eval_items]
    rep = _eval_model(cfg, run, model, held)
    records = run.reports / f"eval_{step}.jsonl"
    write_jsonl(records, rep.to_records())
    summary = rep.summary()
    summary["checkpoint"] = step
    path = _write_json(run.reports / f"eval_{step}.json", summary)
    run.manifest(f"eval_{step}", cfg, [records, path])
    return summary


def forgetting(cfg: PipelineConfig, root: str | Path) -> dict:
    """Compare the pre-Stage-II snapshot, the dual-branch model and the full-finetune baseline."""
    run = Run(root)
    world = cfg.world()
    vocab = text_vocab(world)
    arms = {"pre_stage2": ("align2", False), "dual_branch": ("generate2", False), "full_finetune": ("baseline", True)}
    models = {arm: run.load_model(step, cfg, tied) for arm, (step, tied) in arms.items()}
    held_pairs = run.pairs("pairs_heldout.jsonl", world)
    mcfg = cfg.model_config()
    ppl_seqs, _ = assemble_all(held_pairs, "pretrain", mcfg, vocab)
    probe = ppl_seqs[:cfg.probe_items]
    if not probe:
        raise DataError("no held-out text sequences for the probe batch")
    ref_logits = text_probe_logits(models["pre_stage2"], probe)
    held = sorted(run.utterances("heldout.jsonl"), key=lambda u: u.uid)[:cfg.forget_eval_items]
    table = {}
    for arm, model in models.items():
        logits = text_probe_logits(model, probe)
        ter = _eval_model(cfg, run, model, held)
        table[arm] = {
            "checkpoint": arms[arm][0],
            "text_logit_max_abs_dev": float(np.abs(logits.astype(np.float64) - ref_logits).max()),
            "text_logits_bitwise_equal": bool(np.array_equal(logits, ref_logits)),
            "text_perplexity": text_perplexity(model, ppl_seqs),
            "speech_ter": ter.mean_ter, "speech_dialect_match": ter.rate("dialect_match"),
            "eval_items": len(held),
        }
    pre = table["pre_stage2"]["text_perplexity"]
    for arm in table:
        table[arm]["perplexity_change"] = table[arm]["text_perplexity"] - pre
    report = {"arms": table, "probe_items": len(probe), "perplexity_items": len(ppl_seqs),
              "dual_dev_below_baseline":
                  abs(table["dual_branch"]["perplexity_change"]) < abs(table["full_finetune"]["perplexity_change"])}
    path = _write_json(run.reports / "forgetting.json", report)
    run.manifest("forget", cfg, [path])
    return report


def forgetting_table(report: dict) -> str:
    rows = [("arm", "text dev", "perplexity", "ppl change", "TER", "dialect")]
    for arm, r in report["arms"].items():
        ter = "n/a" if r["speech_ter"] is None else f"{r['speech_ter']:.3f}"
        dia = "n/a" if r["speech_dialect_match"] is None else f"{r['speech_dialect_match']:.3f}"
        rows.append((arm, f"{r['text_logit_max_abs_dev']:.3g}", f"{r['text_perplexity']:.4f}",
                     f"{r['perplexity_change']:+.4f}", ter, dia))
    return format_table(rows)


def eval_table(summary: dict) -> str:
    rows = [("dialect", "items", "scored", "mean TER", "dialect match")]
    for d, r in sorted(summary["per_dialect"].items(), key=lambda kv: int(kv[0])):
        ter = "n/a" if r["mean_ter"] is None else f"{r['mean_ter']:.4f}"
        rows.append((d, str(r["items"]), str(r["scored"]), ter, f"{r['dialect_match']:.3f}"))
    ter = "n/a" if summary["mean_ter"] is None else f"{summary['mean_ter']:.4f}"
    rows.append(("all", str(summary["items"]), str(summary["scored"]), ter, f"{summary['dialect_match']:.3f}"))
    return format_table(rows)


def format_table(rows: list[tuple]) -> str:
    widths = [max(len(str(r[i])) for r in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def run_pipeline(cfg: PipelineConfig, root: str | Path, with_forgetting: bool = True, log=None) -> dict:
    """datagen, every training step, CFM, eval and (optionally) the forgetting report."""
    datagen(cfg, root)
    train_all(cfg, root, with_baseline=with_forgetting, log=log)
    out = {"eval": evaluate(cfg, root)}
    if with_forgetting:
        out["forgetting"] = forgetting(cfg, root)
    return out



# ---------------------------------------------------------------- synthesis

def prompt_from_uid(root: str | Path, uid: int) -> np.ndarray:
    run = Run(root)
    for u in run.utterances("corpus.jsonl"):
        if u.uid == uid:
            return render_speech(u, run.config().world())
    raise ArgumentError(f"no utterance with uid {uid} in {run.data / 'corpus.jsonl'}")


def synthesize(cfg: PipelineConfig, root: str | Path, prompt_frames: np.ndarray, chunks: list[list[int]],
               out_dir: str | Path, mode: str = "streaming", decode: str = "greedy", seed: int = 0,
               step: str = "generate2", vocode_chunk: int = 2, on_events=None) -> dict:
    """Write tokens.txt, frames.bin and (streaming) events.jsonl plus latency.json into ``out_dir``.

    ``chunks`` are the text pieces as they arrive; offline mode joins them.
    ``on_events`` is called with each batch of streaming events as it is produced.
    """
    if mode not in ("streaming", "offline"):
        raise ArgumentError("mode must be 'streaming' or 'offline'")
    run = Run(root)
    model = run.load_model(step, cfg)
    world = cfg.world()
    vocab = text_vocab(world)
    cfm = _vocoder(cfg, run)
    codec = load_codec(world)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    if mode == "offline":
        res = synthesize_offline(model, prompt_frames, [t for c in chunks for t in c], vocab, decode, seed)
        tokens = [int(t) for t in res.tokens]
        frames = vocode(tokens, codec, cfm, cfg.cfm_sample_steps, seed)
        summary = {"tokens": len(tokens), "extensions": res.extensions, "truncated": res.truncated}
    else:
        session = open_session(model, prompt_frames, vocab, decode, seed)
        for c in chunks:
            evs = push_text(session, c)
            if on_events and evs:
                on_events(evs)
        evs = finalize(session)
        if on_events:
            on_events(evs)
        tokens = stream_tokens(session.events)
        if cfm is not None:
            parts = chunked_vocode(cfm, session.events, vocode_chunk, cfg.cfm_sample_steps, seed)
            frames = np.concatenate(parts) if parts else np.zeros((0, world.F), np.float32)
        else:
            frames = codec.decode([t for t in tokens if t != codec.eos] + [codec.eos])
        write_jsonl(out / "events.jsonl", [e.to_record(with_time=False) for e in session.events])
        lat = latency_report(session)
        _write_json(out / "latency.json", lat.to_record())
        outputs += [out / "events.jsonl", out / "latency.json"]
        summary = lat.to_record()
        summary["timing"] = lat.timing()
    (out / "tokens.txt").write_text(" ".join(map(str, tokens)) + "\n", encoding="utf-8")
    write_frames(out / "frames.bin", frames)
    outputs += [out / "tokens.txt", out / "frames.bin"]
    rec = {"command": "synth", "mode": mode, "decode": decode, "seed": seed, "checkpoint": step,
           "config_hash": cfg.hash(), "versions": {"goat_tts": __version__, "numpy": np.__version__},
           "outputs": {p.name: _digest(p) for p in sorted(outputs)}}
    _write_json(out / "manifest.json", rec)
    summary["frames"] = int(len(frames))
    return summary
