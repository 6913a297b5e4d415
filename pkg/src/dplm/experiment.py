"""End-to-end evaluation schema: baselines, fine-tunes, reports.

One config file drives four stages (five with the optional DP-from-scratch
run): a non-private model trained on the public corpus only, a non-private
model trained on the private corpus only, a non-private fine-tune of the
public model on the private corpus, and a DPSGD fine-tune of the public
model. Every stage is evaluated on the private dev and test splits; DP
stages additionally report (epsilon, epsilon/gamma) from their ledger.
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import accountant, corpus, model as model_mod, numerics, optimizer
from .corpus import ContextWindowDataset, Vocabulary
from .model import LanguageModel
from .optimizer import MetricRow, PrivacySpec, TrainConfig


class ExperimentError(RuntimeError):
    """Raised when a pipeline stage or report cannot proceed."""


@dataclass(frozen=True)
class StageSettings:
    """Per-stage training knobs; seeds and optimizer kind are derived."""

    batch_size: int = 256
    epochs: int = 5
    learning_rate: float = 1e-3


@dataclass(frozen=True)
class ExperimentConfig:
    public_corpus: str
    private_corpus: str
    output_dir: str
    min_count: int = 2
    context_len: int = 20
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    split_seed: int = 0
    preset: str = "small"
    embed_dim: int = 64
    hidden: tuple[int, ...] = (500, 250, 50)
    pretrain: StageSettings = field(default_factory=StageSettings)
    finetune: StageSettings = field(default_factory=StageSettings)
    privacy: PrivacySpec = field(
        default_factory=lambda: PrivacySpec(sigma=0.1, clip_norm=1.0, delta=1e-5)
    )
    eval_interval: int = 200
    seed: int = 1
    dp_scratch: bool = False
    prompts: tuple[str, ...] = ()
    generate_length: int = 10

    def architecture(self, vocab_size: int) -> numerics.Architecture:
        if self.preset == "custom":
            return numerics.Architecture(
                vocab_size=vocab_size,
                context_len=self.context_len,
                embed_dim=self.embed_dim,
                hidden=self.hidden,
            )
        arch = model_mod.preset(self.preset, vocab_size, embed_dim=self.embed_dim)
        return dataclasses.replace(arch, context_len=self.context_len)


_CONFIG_KEYS = "corpus model pretrain finetune privacy run generate".split()


def config_to_text(cfg: ExperimentConfig) -> str:
    """Canonical flat key=value rendering; hashable and diff-friendly."""
    lines = [
        f"corpus.public={cfg.public_corpus}",
        f"corpus.private={cfg.private_corpus}",
        f"corpus.min_count={cfg.min_count}",
        f"corpus.context_len={cfg.context_len}",
        "corpus.split_fractions=" + ",".join(repr(f) for f in cfg.split_fractions),
        f"corpus.split_seed={cfg.split_seed}",
        f"model.preset={cfg.preset}",
        f"model.embed_dim={cfg.embed_dim}",
        "model.hidden=" + ",".join(str(h) for h in cfg.hidden),
        f"pretrain.batch_size={cfg.pretrain.batch_size}",
        f"pretrain.epochs={cfg.pretrain.epochs}",
        f"pretrain.learning_rate={cfg.pretrain.learning_rate!r}",
        f"finetune.batch_size={cfg.finetune.batch_size}",
        f"finetune.epochs={cfg.finetune.epochs}",
        f"finetune.learning_rate={cfg.finetune.learning_rate!r}",
        f"privacy.sigma={cfg.privacy.sigma!r}",
        f"privacy.clip_norm={cfg.privacy.clip_norm!r}",
        f"privacy.delta={cfg.privacy.delta!r}",
        f"privacy.gamma={cfg.privacy.gamma}",
        f"privacy.per_example_noise={str(cfg.privacy.per_example_noise).lower()}",
        f"run.seed={cfg.seed}",
        f"run.eval_interval={cfg.eval_interval}",
        f"run.output_dir={cfg.output_dir}",
        f"run.dp_scratch={str(cfg.dp_scratch).lower()}",
        "generate.prompts=" + "|".join(cfg.prompts),
        f"generate.length={cfg.generate_length}",
    ]
    return "\n".join(lines) + "\n"


def _parse_keyvalues(text: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ExperimentError(f"config line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value
    return values


def config_from_text(text: str) -> ExperimentConfig:
    kv = _parse_keyvalues(text)

    def get(key: str, default: str | None = None) -> str:
        if key in kv:
            return kv[key]
        if default is None:
            raise ExperimentError(f"config is missing required key {key!r}")
        return default

    preset = get("model.preset", "small")
    default_epochs = "2" if preset == "large" else "5"
    fractions = tuple(float(f) for f in get("corpus.split_fractions", "0.8,0.1,0.1").split(","))
    if len(fractions) != 3:
        raise ExperimentError("corpus.split_fractions must have three entries")
    prompts_raw = get("generate.prompts", "")
    return ExperimentConfig(
        public_corpus=get("corpus.public"),
        private_corpus=get("corpus.private"),
        output_dir=get("run.output_dir"),
        min_count=int(get("corpus.min_count", "2")),
        context_len=int(get("corpus.context_len", "20")),
        split_fractions=fractions,
        split_seed=int(get("corpus.split_seed", "0")),
        preset=preset,
        embed_dim=int(get("model.embed_dim", "64")),
        hidden=tuple(int(h) for h in get("model.hidden", "500,250,50").split(",")),
        pretrain=StageSettings(
            batch_size=int(get("pretrain.batch_size", "256")),
            epochs=int(get("pretrain.epochs", default_epochs)),
            learning_rate=float(get("pretrain.learning_rate", "1e-3")),
        ),
        finetune=StageSettings(
            batch_size=int(get("finetune.batch_size", "256")),
            epochs=int(get("finetune.epochs", default_epochs)),
            learning_rate=float(get("finetune.learning_rate", "1e-3")),
        ),
        privacy=PrivacySpec(
            sigma=float(get("privacy.sigma", "0.1")),
            clip_norm=float(get("privacy.clip_norm", "1.0")),
            delta=float(get("privacy.delta", "1e-5")),
            gamma=int(get("privacy.gamma", "1")),
            per_example_noise=get("privacy.per_example_noise", "false") == "true",
        ),
        eval_interval=int(get("run.eval_interval", "200")),
        seed=int(get("run.seed", "1")),
        dp_scratch=get("run.dp_scratch", "false") == "true",
        prompts=tuple(p for p in prompts_raw.split("|") if p),
        generate_length=int(get("generate.length", "10")),
    )


def load_config(path: str | Path) -> ExperimentConfig:
    cfg = config_from_text(Path(path).read_text(encoding="utf-8"))
    for corpus_path in (cfg.public_corpus, cfg.private_corpus):
        if not Path(corpus_path).exists():
            raise ExperimentError(f"corpus file not found: {corpus_path}")
    return cfg


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(config_to_text(cfg).encode("utf-8")).hexdigest()


#: Stage names in execution order. Later stages load the public baseline's
#: checkpoint; the DP-from-scratch stage is optional.
SCHEMA_STAGES = ("public_baseline", "private_baseline", "finetune", "dp_finetune")
DP_SCRATCH_STAGE = "dp_scratch"

STAGE_LABELS = {
    "public_baseline": ("public", "private"),
    "private_baseline": ("private", "private"),
    "finetune": ("public+private", "private"),
    "dp_finetune": ("public+private(DP)", "private"),
    "dp_scratch": ("private(DP)", "private"),
}


@dataclass
class StageRecord:
    name: str
    sigma: float
    checkpoint: str
    metrics: str
    init_hash: str | None = None
    ledger: str | None = None
    epsilon_report: str | None = None


@dataclass
class RunManifest:
    run_id: str
    config_hash: str
    seed: int
    stages: list[StageRecord]
    generated: str | None = None

    def stage(self, name: str) -> StageRecord:
        for record in self.stages:
            if record.name == name:
                return record
        raise ExperimentError(f"manifest has no stage {name!r}")

    def save(self, path: str | Path) -> None:
        lines = [
            f"run_id={self.run_id}",
            f"config_hash={self.config_hash}",
            f"seed={self.seed}",
            "stages=" + ",".join(s.name for s in self.stages),
        ]
        for s in self.stages:
            lines.append(f"stage.{s.name}.sigma={s.sigma!r}")
            lines.append(f"stage.{s.name}.checkpoint={s.checkpoint}")
            lines.append(f"stage.{s.name}.metrics={s.metrics}")
            if s.init_hash:
                lines.append(f"stage.{s.name}.init_hash={s.init_hash}")
            if s.ledger:
                lines.append(f"stage.{s.name}.ledger={s.ledger}")
            if s.epsilon_report:
                lines.append(f"stage.{s.name}.epsilon={s.epsilon_report}")
        if self.generated:
            lines.append(f"generated={self.generated}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "RunManifest":
        kv = _parse_keyvalues(Path(path).read_text(encoding="utf-8"))
        stages = []
        for name in kv["stages"].split(","):
            stages.append(
                StageRecord(
                    name=name,
                    sigma=float(kv[f"stage.{name}.sigma"]),
                    checkpoint=kv[f"stage.{name}.checkpoint"],
                    metrics=kv[f"stage.{name}.metrics"],
                    init_hash=kv.get(f"stage.{name}.init_hash"),
                    ledger=kv.get(f"stage.{name}.ledger"),
                    epsilon_report=kv.get(f"stage.{name}.epsilon"),
                )
            )
        return cls(
            run_id=kv["run_id"],
            config_hash=kv["config_hash"],
            seed=int(kv["seed"]),
            stages=stages,
            generated=kv.get("generated"),
        )


def _file_hash(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _final_eval_rows(
    lm: LanguageModel,
    step: int,
    epoch: int,
    dev: ContextWindowDataset,
    test: ContextWindowDataset,
) -> list[MetricRow]:
    return [
        (step, epoch, "dev", "perplexity", model_mod.perplexity(lm, dev)),
        (step, epoch, "test", "perplexity", model_mod.perplexity(lm, test)),
    ]


def _write_epsilon_report(
    path: Path, ledger: accountant.PrivacyLedger, spec: PrivacySpec
) -> tuple[float, int, float]:
    curve = accountant.compose(ledger)
    eps, order = accountant.epsilon(curve, spec.delta)
    eps_group = accountant.group_rescale(eps, spec.gamma)
    path.write_text(
        f"delta={spec.delta!r} epsilon={eps!r} order={order} "
        f"gamma={spec.gamma} epsilon_group={eps_group!r}\n",
        encoding="utf-8",
    )
    return eps, order, eps_group


def run_schema(cfg: ExperimentConfig, log=print) -> RunManifest:
    """Execute the full evaluation schema and write all artifacts.

    Deterministic for a given config: rerunning into a fresh directory
    reproduces byte-identical metrics CSVs and checkpoints.
    """
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg_hash = config_hash(cfg)
    run_id = f"run-{cfg_hash[:12]}"

    public_sents = corpus.encode_corpus  # placeholder for readability below
    vocab = corpus.build_vocabulary(
        corpus.read_lines(cfg.public_corpus),
        corpus.read_lines(cfg.private_corpus),
        min_count=cfg.min_count,
    )
    vocab.save(out / "vocab.txt")
    arch = cfg.architecture(vocab.size)

    public_train = corpus.load_windows(cfg.public_corpus, vocab, k=cfg.context_len)
    private_all = corpus.load_windows(cfg.private_corpus, vocab, k=cfg.context_len)
    private_train, private_dev, private_test = corpus.split(
        private_all, cfg.split_fractions, cfg.split_seed
    )
    log(
        f"{run_id}: vocab={vocab.size} public_windows={public_train.n} "
        f"private train/dev/test windows={private_train.n}/{private_dev.n}/{private_test.n}"
    )

    stage_names = list(SCHEMA_STAGES) + ([DP_SCRATCH_STAGE] if cfg.dp_scratch else [])
    records: list[StageRecord] = []
    stage_models: dict[str, LanguageModel] = {}
    base_checkpoint = out / "public_baseline.ckpt"

    for idx, name in enumerate(stage_names):
        stage_seed = cfg.seed * 1000 + idx
        private_stage = name in ("dp_finetune", "dp_scratch")
        settings = cfg.pretrain if name == "public_baseline" else cfg.finetune
        train_cfg = TrainConfig(
            batch_size=settings.batch_size,
            epochs=settings.epochs,
            learning_rate=settings.learning_rate,
            seed=stage_seed,
            optimizer="dpsgd" if private_stage else "adam",
        )
        data = public_train if name == "public_baseline" else private_train
        init_hash = None
        try:
            if name in ("finetune", "dp_finetune"):
                ckpt_arch, params = numerics.load_checkpoint(base_checkpoint)
                lm = LanguageModel(ckpt_arch, params)
                init_hash = _file_hash(base_checkpoint)
            else:
                lm = LanguageModel.initialized(
                    arch, np.random.default_rng([stage_seed, 1])
                )
            lm, rows, ledger = optimizer.train(
                lm,
                data,
                train_cfg,
                spec=cfg.privacy if private_stage else None,
                dev_data=private_dev,
                eval_interval=cfg.eval_interval,
            )
            total_steps = train_cfg.epochs * math.ceil(data.n / train_cfg.batch_size)
            last_epoch = max(train_cfg.epochs - 1, 0)
            rows.extend(_final_eval_rows(lm, total_steps, last_epoch, private_dev, private_test))

            ckpt_path = out / f"{name}.ckpt"
            metrics_path = out / f"{name}.metrics.csv"
            numerics.save_checkpoint(ckpt_path, lm.arch, lm.params)
            optimizer.write_metrics_csv(rows, metrics_path)

            record = StageRecord(
                name=name,
                sigma=cfg.privacy.sigma if private_stage else 0.0,
                checkpoint=ckpt_path.name,
                metrics=metrics_path.name,
                init_hash=init_hash,
            )
            if ledger is not None:
                ledger_path = out / f"{name}.ledger.csv"
                ledger.save(ledger_path)
                record.ledger = ledger_path.name
                if cfg.privacy.sigma > 0:
                    eps_path = out / f"{name}.epsilon.txt"
                    eps, order, eps_group = _write_epsilon_report(eps_path, ledger, cfg.privacy)
                    record.epsilon_report = eps_path.name
                    log(
                        f"{run_id}: {name} epsilon={eps:.4f} (order {order}) "
                        f"epsilon/gamma={eps_group:.4f}"
                    )
            records.append(record)
            stage_models[name] = lm
            pp_test = rows[-1][4]
            log(f"{run_id}: {name} done, test perplexity={pp_test:.2f}")
        except (optimizer.TrainingError, numerics.ShapeMismatchError, OSError) as exc:
            raise ExperimentError(f"stage {name} failed: {exc}") from exc

    manifest = RunManifest(run_id=run_id, config_hash=cfg_hash, seed=cfg.seed, stages=records)

    if cfg.prompts:
        gen_path = out / "generated.txt"
        with open(gen_path, "w", encoding="utf-8", newline="\n") as fh:
            for idx, name in enumerate(stage_names):
                for p_idx, prompt in enumerate(cfg.prompts):
                    text = model_mod.generate(
                        stage_models[name],
                        vocab,
                        prompt,
                        length=cfg.generate_length,
                        mode="sample",
                        seed=cfg.seed * 1000 + idx * 100 + p_idx,
                    )
                    fh.write(f"{name}\t{prompt}\t{text}\n")
        manifest.generated = gen_path.name

    manifest.save(out / "manifest.txt")
    return manifest


@dataclass
class ReportRow:
    stage: str
    train_set: str
    eval_set: str
    sigma: float
    pp_dev: float
    pp_test: float


@dataclass
class Report:
    rows: list[ReportRow]
    flags: dict[str, bool]


def _final_perplexities(metrics_path: Path) -> tuple[float, float]:
    rows = optimizer.read_metrics_csv(metrics_path)
    dev = [v for _, _, split, metric, v in rows if split == "dev" and metric == "perplexity"]
    test = [v for _, _, split, metric, v in rows if split == "test" and metric == "perplexity"]
    if not dev or not test:
        raise ExperimentError(f"{metrics_path}: missing final dev/test perplexity rows")
    return dev[-1], test[-1]


def compare_report(manifest: RunManifest, base_dir: str | Path) -> Report:
    """Final perplexity table plus the key ordering flags, from the CSVs."""
    base = Path(base_dir)
    rows: list[ReportRow] = []
    pp_test: dict[str, float] = {}
    for record in manifest.stages:
        metrics_path = base / record.metrics
        if not metrics_path.exists():
            raise ExperimentError(f"manifest incomplete: missing {metrics_path}")
        dev, test = _final_perplexities(metrics_path)
        train_set, eval_set = STAGE_LABELS.get(record.name, (record.name, "private"))
        rows.append(ReportRow(record.name, train_set, eval_set, record.sigma, dev, test))
        pp_test[record.name] = test

    flags: dict[str, bool] = {}
    required = {"public_baseline", "private_baseline", "finetune", "dp_finetune"}
    if required.issubset(pp_test):
        flags["finetuned_beats_baselines"] = (
            pp_test["finetune"] < pp_test["public_baseline"]
            and pp_test["finetune"] < pp_test["private_baseline"]
        )
        flags["dp_finetuned_beats_public"] = (
            pp_test["dp_finetune"] < pp_test["public_baseline"]
        )
    if DP_SCRATCH_STAGE in pp_test:
        scratch = pp_test[DP_SCRATCH_STAGE]
        others = [v for k, v in pp_test.items() if k != DP_SCRATCH_STAGE]
        flags["dp_scratch_worst_or_divergent"] = (
            not math.isfinite(scratch) or all(scratch > v for v in others)
        )
    return Report(rows=rows, flags=flags)


REPORT_HEADER = "stage,train_set,eval_set,sigma,pp_dev,pp_test"


def write_report(report: Report, out_dir: str | Path, manifest: RunManifest | None = None,
                 base_dir: str | Path | None = None) -> list[Path]:
    """Write report.csv, report_flags.txt, and the perplexity figure."""
    from . import plots

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    csv_path = out / "report.csv"
    with open(csv_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(REPORT_HEADER + "\n")
        for r in report.rows:
            fh.write(
                f"{r.stage},{r.train_set},{r.eval_set},{r.sigma!r},{r.pp_dev!r},{r.pp_test!r}\n"
            )
    written.append(csv_path)

    flags_path = out / "report_flags.txt"
    with open(flags_path, "w", encoding="utf-8", newline="\n") as fh:
        for key, value in report.flags.items():
            fh.write(f"{key}={str(value).lower()}\n")
    written.append(flags_path)

    if manifest is not None and base_dir is not None:
        curves: dict[str, list[tuple[int, float]]] = {}
        for record in manifest.stages:
            rows = optimizer.read_metrics_csv(Path(base_dir) / record.metrics)
            curves[record.name] = [
                (step, v) for step, _, split, metric, v in rows
                if split == "dev" and metric == "perplexity"
            ]
        fig_path = out / "perplexity_curves.png"
        plots.save_perplexity_curves(curves, fig_path)
        written.append(fig_path)
    return written


TOKEN_REPORT_HEADER = ("Dataset", "Tokens (train)", "Tokens (test)")


def token_report(cfg: ExperimentConfig) -> list[tuple[str, int, int | None]]:
    """Token counts per corpus; EOS counts as a token, matching window N."""
    vocab = corpus.build_vocabulary(
        corpus.read_lines(cfg.public_corpus),
        corpus.read_lines(cfg.private_corpus),
        min_count=cfg.min_count,
    )
    public_train = corpus.load_windows(cfg.public_corpus, vocab, k=cfg.context_len)
    private_all = corpus.load_windows(cfg.private_corpus, vocab, k=cfg.context_len)
    private_train, _, private_test = corpus.split(
        private_all, cfg.split_fractions, cfg.split_seed
    )
    return [
        ("public", public_train.n, None),
        ("private", private_train.n, private_test.n),
    ]
