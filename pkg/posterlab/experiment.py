"""Experiment specs, end-to-end evaluation and the ablation protocols."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from tabulate import tabulate

from posterlab.data import MaskRegime, PosterDataset, load_dataset, sample_seed
from posterlab.flow import FlowConfig, generate
from posterlab.metrics import (
    EvalReport,
    extension_rate,
    mean_ned,
    pair_texts,
    preservation_scores,
    sentence_acc,
    show_table,
    split_by_line_count,
    style_acc,
)
from posterlab.model import ModelConfig, PosterDiT, TrainMode, init_params, load_checkpoint, save_checkpoint
from posterlab.ocr import OcrConfig, ocr
from posterlab.trainer import TrainConfig, train_model
from posterlab.version import __version__

logger = logging.getLogger(__name__)

# reference rows quoted alongside the toy ablations, in percent / accuracy
EXTENSION_REFERENCE = {"baseline": 41.0, "adapter_branch": 23.6, "lora": 2.8, "full": 0.6}
CPE_REFERENCE = {"cpe": 0.7133, "no_cpe": 0.2494, "cpe_multi": 0.2571, "no_cpe_multi": 0.0461}
DATA_SCALE_REFERENCE = {"3k/300ep": 3.6, "3k/10ep": 9.3, "3k/3ep": 17.3}


class ConfigMismatchError(ValueError):
    pass


class AcceptanceError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainStage:
    regime: MaskRegime = MaskRegime.POSTER
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        object.__setattr__(self, "regime", MaskRegime(self.regime))
        if isinstance(self.train, dict):
            object.__setattr__(self, "train", TrainConfig.from_dict(self.train))

    def with_mode(self, mode: TrainMode) -> TrainStage:
        return TrainStage(self.regime, dataclasses.replace(self.train, mode=mode))

    def with_epochs(self, epochs: int) -> TrainStage:
        return TrainStage(self.regime, dataclasses.replace(self.train, epochs=epochs))

    def to_dict(self) -> dict:
        return {"regime": self.regime.value, "train": self.train.to_dict()}


@dataclass(frozen=True)
class ExperimentSpec:
    """Everything needed to reproduce one training run or ablation.

    Relative dataset and checkpoint paths are resolved against ``root`` (the directory of the spec
    file when loaded with :meth:`from_file`).
    """

    name: str
    train_data: str
    test_data: str
    model: ModelConfig = field(default_factory=ModelConfig)
    stages: tuple[TrainStage, ...] = (TrainStage(),)
    cpe_enabled: bool = True
    flow: FlowConfig = field(default_factory=FlowConfig)
    eval_count: int | None = None
    eval_seed: int = 0
    init_seed: int = 0
    init_checkpoint: str | None = None
    lora_rank: int = 4
    adapter_k: int = 2
    data_sizes: tuple[int, ...] = ()
    epoch_map: dict = field(default_factory=dict)
    root: str = "."

    def __post_init__(self):
        if isinstance(self.model, dict):
            object.__setattr__(self, "model", ModelConfig.from_dict(self.model))
        if isinstance(self.flow, dict):
            object.__setattr__(self, "flow", FlowConfig.from_dict(self.flow))
        stages = tuple(TrainStage(**s) if isinstance(s, dict) else s for s in self.stages)
        object.__setattr__(self, "stages", stages)
        object.__setattr__(self, "data_sizes", tuple(self.data_sizes))
        object.__setattr__(self, "epoch_map", {int(k): [int(e) for e in v] for k, v in self.epoch_map.items()})
        if not self.stages:
            raise ValueError("an experiment needs at least one training stage")
        if self.eval_count is not None and self.eval_count < 1:
            raise ValueError("eval_count must be >= 1")

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.root) / p

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "train_data": self.train_data,
            "test_data": self.test_data,
            "model": self.model.to_dict(),
            "stages": [s.to_dict() for s in self.stages],
            "cpe_enabled": self.cpe_enabled,
            "flow": self.flow.to_dict(),
            "eval_count": self.eval_count,
            "eval_seed": self.eval_seed,
            "init_seed": self.init_seed,
            "init_checkpoint": self.init_checkpoint,
            "lora_rank": self.lora_rank,
            "adapter_k": self.adapter_k,
            "data_sizes": list(self.data_sizes),
            "epoch_map": {str(k): v for k, v in self.epoch_map.items()},
        }

    @classmethod
    def from_dict(cls, d: dict, root: str | Path = ".") -> ExperimentSpec:
        return cls(**d, root=str(root))

    @classmethod
    def from_file(cls, path: str | Path) -> ExperimentSpec:
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text()), root=path.parent)


@dataclass(frozen=True)
class EvalFlags:
    n_steps: int | None = None
    paste_both: bool = False
    seed: int = 0
    limit: int | None = None
    cpe_enabled: bool | None = None


def file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def load_datasets(spec: ExperimentSpec) -> tuple[PosterDataset, PosterDataset]:
    train = load_dataset(spec.resolve(spec.train_data))
    test = load_dataset(spec.resolve(spec.test_data))
    if train.config_hash() != test.config_hash():
        raise ConfigMismatchError(f"train ({train.config_hash()}) and test ({test.config_hash()}) configs differ")
    if tuple(train.config.canvas) != tuple(spec.model.canvas):
        raise ConfigMismatchError(f"dataset canvas {train.config.canvas} != model canvas {spec.model.canvas}")
    return train, test


def initial_model(spec: ExperimentSpec) -> tuple[PosterDiT, dict]:
    """The shared starting point of every arm, with its seed lineage."""
    if spec.init_checkpoint is None:
        return init_params(spec.model, spec.init_seed), {"init_seed": spec.init_seed}
    path = spec.resolve(spec.init_checkpoint)
    if not path.exists():
        raise FileNotFoundError(f"base checkpoint {path} does not exist")
    model, info = load_checkpoint(path)
    if info.config != spec.model:
        raise ConfigMismatchError(f"base checkpoint {path} was trained with a different model config")
    return model, {**info.seeds, "init_checkpoint": file_hash(path)}


def run_stages(
    model: PosterDiT, stages, samples, cpe_enabled: bool, snapshot_dir: Path | None = None, progress: bool = False
) -> tuple[PosterDiT, list[float], TrainMode]:
    losses: list[float] = []
    mode = TrainMode.full()
    for stage in stages:
        model, trace = train_model(
            model, samples, stage.train, stage.regime, cpe_enabled, snapshot_dir=snapshot_dir, progress=progress
        )
        losses.extend(trace)
        mode = stage.train.mode
    return model, losses, mode


def train(spec: ExperimentSpec, out_dir: str | Path, progress: bool = False) -> Path:
    """Run every stage of ``spec`` and persist the checkpoint, the loss trace and the spec.

    Raises
    ------
    NonFiniteLossError
        If the loss diverges; a snapshot is left in ``out_dir``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_set, _ = load_datasets(spec)
    model, lineage = initial_model(spec)
    model, losses, mode = run_stages(model, spec.stages, train_set, spec.cpe_enabled, out_dir, progress)
    seeds = {**lineage, "train_seeds": [s.train.seed for s in spec.stages]}
    extra = {
        "dataset_hash": train_set.config_hash(),
        "cpe_enabled": spec.cpe_enabled,
        "spec": spec.name,
        "version": __version__,
    }
    path = out_dir / "model.ckpt"
    save_checkpoint(path, model, mode, seeds=seeds, extra=extra)
    (out_dir / "losses.json").write_text(json.dumps(losses))
    (out_dir / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2))
    logger.info("saved %s (final loss %.4f)", path, losses[-1])
    return path


# -- evaluation ------------------------------------------------------------------------


def _text_scores(pairs: list[tuple[str, str]]) -> dict[str, float]:
    return {"sen_acc": sentence_acc(pairs), "ned": mean_ned(pairs), "n_lines": len(pairs)}


def evaluate(
    model: PosterDiT,
    testset: PosterDataset,
    flow_cfg: FlowConfig,
    seed: int = 0,
    cpe_enabled: bool = True,
    paste_both: bool = False,
    meta: dict | None = None,
) -> EvalReport:
    """Generate every test poster with fixed seeds and run all metrics on the raw generations."""
    if len(testset) == 0:
        raise ValueError("empty test set")
    samples = list(testset)
    seeds = [sample_seed(seed, i) for i in range(len(samples))]
    raw_cfg = dataclasses.replace(flow_cfg, paste_product=False)
    gens = generate(model, samples, raw_cfg, seeds, cpe_enabled)
    ocr_cfg = OcrConfig.from_dataset_config(testset.config)
    pairs_per_sample = [pair_texts(ocr(g.image, ocr_cfg), s.layout) for g, s in zip(gens, samples)]
    all_pairs = [p for pairs in pairs_per_sample for p in pairs]
    splits = {}
    for name, idx in split_by_line_count(samples).items():
        if idx:
            splits[name] = _text_scores([p for i in idx for p in pairs_per_sample[i]])
    scores = [preservation_scores(g, s, model, cpe_enabled) for g, s in zip(gens, samples)]
    if paste_both:
        pasted = generate(model, samples, dataclasses.replace(flow_cfg, paste_product=True), seeds, cpe_enabled)
        pasted_pairs = [p for g, s in zip(pasted, samples) for p in pair_texts(ocr(g.image, ocr_cfg), s.layout)]
        splits["pasted"] = {
            **_text_scores(pasted_pairs),
            "style_acc": style_acc([g.image for g in pasted], samples, testset.config),
        }
    return EvalReport(
        sen_acc=sentence_acc(all_pairs),
        ned=mean_ned(all_pairs),
        extension_rate=extension_rate(gens, samples),
        preservation_psnr=float(np.mean([s[0] for s in scores])),
        embed_similarity=float(np.mean([s[1] for s in scores])),
        style_acc=style_acc(gens, samples, testset.config),
        n_samples=len(samples),
        n_lines=len(all_pairs),
        splits=splits,
        pasted=False,
        meta={
            "dataset_hash": testset.config_hash(),
            "model_config_hash": model.cfg.config_hash(),
            "seed": seed,
            "n_sample_steps": flow_cfg.n_sample_steps,
            "cpe_enabled": cpe_enabled,
            "version": __version__,
            **(meta or {}),
        },
    )


def eval_suite(checkpoint: str | Path, testset: PosterDataset, flags: EvalFlags = EvalFlags()) -> EvalReport:
    """Evaluate a saved checkpoint on ``testset``.

    Raises
    ------
    ConfigMismatchError
        If the checkpoint was trained on data from a different dataset config or canvas.
    """
    model, info = load_checkpoint(checkpoint)
    trained_on = info.extra.get("dataset_hash")
    if trained_on is not None and trained_on != testset.config_hash():
        raise ConfigMismatchError(f"checkpoint trained on dataset {trained_on}, test set is {testset.config_hash()}")
    if tuple(testset.config.canvas) != tuple(info.config.canvas):
        raise ConfigMismatchError(f"test canvas {testset.config.canvas} != model canvas {info.config.canvas}")
    cpe = flags.cpe_enabled if flags.cpe_enabled is not None else info.extra.get("cpe_enabled", True)
    flow_cfg = FlowConfig() if flags.n_steps is None else FlowConfig(n_sample_steps=flags.n_steps)
    data = testset if flags.limit is None else testset[: flags.limit]
    meta = {"checkpoint": file_hash(checkpoint), "seeds": info.seeds}
    return evaluate(model, data, flow_cfg, flags.seed, cpe, flags.paste_both, meta)


def write_report(record: dict, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(record, indent=2, sort_keys=True))


# -- ablations -------------------------------------------------------------------------


@dataclass
class AblationReport:
    """Rows of one ablation, the quoted reference values and the directional checks."""

    name: str
    rows: list[dict]
    reference: dict
    checks: dict[str, bool]
    meta: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "name": self.name,
            "rows": self.rows,
            "reference": self.reference,
            "checks": self.checks,
            "passed": self.passed,
            "meta": self.meta,
        }

    def table_rows(self) -> tuple[list[str], list[list]]:
        headers = [k for k in self.rows[0] if not isinstance(self.rows[0][k], (dict, list))]
        return headers, [[row[h] for h in headers] for row in self.rows]

    def table(self, tablefmt: str = "pretty") -> str:
        headers, rows = self.table_rows()
        return tabulate(rows, headers=headers, tablefmt=tablefmt)

    def draw(self):
        """Draw the ablation rows in a table (HTML in a notebook, ASCII in a terminal)."""
        headers, rows = self.table_rows()
        show_table(rows, headers)

    def require(self) -> None:
        failed = [name for name, ok in self.checks.items() if not ok]
        if failed:
            raise AcceptanceError(f"{self.name}: failed checks {', '.join(failed)}")


def _subset(testset: PosterDataset, spec: ExperimentSpec) -> PosterDataset:
    return testset if spec.eval_count is None else testset[: spec.eval_count]


def _base_meta(spec: ExperimentSpec, train_set: PosterDataset, lineage: dict) -> dict:
    return {
        "spec": spec.name,
        "dataset_hash": train_set.config_hash(),
        "model_config_hash": spec.model.config_hash(),
        "init": lineage,
        "eval_seed": spec.eval_seed,
        "version": __version__,
    }


def ablate_extension(spec: ExperimentSpec, out_dir: str | Path, progress: bool = False) -> AblationReport:
    """Adapt one random-patch-pretrained base under each tuning regime and compare extension rates.

    The pretrained base evaluated under poster masks gives the baseline row; ``spec.stages`` is the
    adaptation schedule, rerun once per regime with the same seeds and budget.
    """
    if spec.init_checkpoint is None:
        raise ValueError(f"{spec.name}: the extension ablation needs a pretrained base checkpoint (init_checkpoint)")
    out_dir = Path(out_dir)
    train_set, test_set = load_datasets(spec)
    test_set = _subset(test_set, spec)
    base, lineage = initial_model(spec)
    arms = [
        ("baseline", None),
        ("frozen", TrainMode.frozen()),
        ("adapter_branch", TrainMode.adapter(spec.adapter_k)),
        ("lora", TrainMode.lora(spec.lora_rank)),
        ("full", TrainMode.full()),
    ]
    rows = []
    for name, mode in arms:
        model = base
        if mode is not None:
            stages = [s.with_mode(mode) for s in spec.stages]
            model, _, _ = run_stages(base, stages, train_set, spec.cpe_enabled, out_dir / name, progress)
        report = evaluate(model, test_set, spec.flow, spec.eval_seed, spec.cpe_enabled)
        rows.append(
            {
                "arm": name,
                "extension_rate": report.extension_rate,
                "preservation_psnr": report.preservation_psnr,
                "style_acc": report.style_acc,
                "reference_pct": EXTENSION_REFERENCE.get(name, EXTENSION_REFERENCE["baseline"]),
            }
        )
        logger.info("%s: extension rate %.4f", name, report.extension_rate)
    ext = {row["arm"]: row["extension_rate"] for row in rows}
    checks = {
        "baseline_at_least_5x_full": bool(ext["baseline"] > ext["full"] and ext["baseline"] >= 5 * ext["full"]),
        "full_at_most_lora": bool(ext["full"] <= ext["lora"]),
        "frozen_reproduces_baseline": bool(ext["frozen"] == ext["baseline"]),
    }
    report = AblationReport("extension", rows, EXTENSION_REFERENCE, checks, _base_meta(spec, train_set, lineage))
    write_report(report.to_dict(), out_dir / "report.json")
    return report


def ablate_cpe(spec: ExperimentSpec, out_dir: str | Path, progress: bool = False) -> AblationReport:
    """Train two models that differ only in character position encoding and compare text accuracy."""
    out_dir = Path(out_dir)
    train_set, test_set = load_datasets(spec)
    test_set = _subset(test_set, spec)
    base, lineage = initial_model(spec)
    rows = []
    for name, cpe in (("cpe", True), ("no_cpe", False)):
        model, _, _ = run_stages(base, spec.stages, train_set, cpe, out_dir / name, progress)
        report = evaluate(model, test_set, spec.flow, spec.eval_seed, cpe)
        single = report.splits.get("single", {})
        multi = report.splits.get("multi", {})
        rows.append(
            {
                "arm": name,
                "sen_acc": report.sen_acc,
                "ned": report.ned,
                "single_sen_acc": single.get("sen_acc", float("nan")),
                "multi_sen_acc": multi.get("sen_acc", float("nan")),
                "single_ned": single.get("ned", float("nan")),
                "multi_ned": multi.get("ned", float("nan")),
            }
        )
        logger.info("%s: sen_acc %.4f ned %.4f", name, report.sen_acc, report.ned)
    with_cpe, without = rows
    checks = {
        "sen_acc_gap_at_least_0.15": with_cpe["sen_acc"] - without["sen_acc"] >= 0.15,
        "multi_line_gap_exceeds_single_line_gap": (with_cpe["multi_sen_acc"] - without["multi_sen_acc"])
        > (with_cpe["single_sen_acc"] - without["single_sen_acc"]),
    }
    report = AblationReport("cpe", rows, CPE_REFERENCE, checks, _base_meta(spec, train_set, lineage))
    write_report(report.to_dict(), out_dir / "report.json")
    return report


def iteration_matched(sizes: list[int], total_samples: int) -> dict[int, list[int]]:
    """Epoch counts keeping ``size * epochs`` close to ``total_samples`` for every size."""
    return {size: [max(1, round(total_samples / size))] for size in sizes}


def ablate_data_scale(
    spec: ExperimentSpec,
    out_dir: str | Path,
    sizes: list[int] | None = None,
    epoch_map: dict[int, list[int]] | None = None,
    progress: bool = False,
) -> AblationReport:
    """Full-tune adaptations over dataset sizes and iteration budgets.

    Parameters
    ----------
    sizes : list of int, optional
        Training-set sizes (prefixes of the training set). Defaults to ``spec.data_sizes`` or the
        whole training set.
    epoch_map : dict, optional
        Epoch budgets per size. Defaults to ``spec.epoch_map``, else the stage's own epochs.
    """
    if spec.init_checkpoint is None:
        raise ValueError(f"{spec.name}: the data-scale ablation needs a pretrained base checkpoint (init_checkpoint)")
    out_dir = Path(out_dir)
    train_set, test_set = load_datasets(spec)
    test_set = _subset(test_set, spec)
    base, lineage = initial_model(spec)
    sizes = list(sizes or spec.data_sizes or [len(train_set)])
    epoch_map = epoch_map or spec.epoch_map or {size: [spec.stages[-1].train.epochs] for size in sizes}
    rows = []
    for size in sizes:
        if size > len(train_set):
            raise ValueError(f"size {size} exceeds the {len(train_set)} training samples")
        for epochs in sorted(epoch_map.get(size, [])):
            stages = [s.with_mode(TrainMode.full()).with_epochs(epochs) for s in spec.stages]
            snapshots = out_dir / f"{size}_{epochs}"
            model, _, _ = run_stages(base, stages, train_set[:size], spec.cpe_enabled, snapshots, progress)
            report = evaluate(model, test_set, spec.flow, spec.eval_seed, spec.cpe_enabled)
            rows.append(
                {"size": size, "epochs": epochs, "iterations": size * epochs, "extension_rate": report.extension_rate}
            )
            logger.info("size %d epochs %d: extension rate %.4f", size, epochs, report.extension_rate)
    if not rows:
        raise ValueError("no (size, epochs) cells to run")
    checks = {}
    for size in sizes:
        cells = [r["extension_rate"] for r in rows if r["size"] == size]
        if len(cells) > 1:
            checks[f"size_{size}_non_increasing"] = all(a >= b for a, b in zip(cells, cells[1:]))
    if not checks:
        warnings.warn("no size has more than one budget; the trend check is vacuous")
    report = AblationReport("data_scale", rows, DATA_SCALE_REFERENCE, checks, _base_meta(spec, train_set, lineage))
    write_report(report.to_dict(), out_dir / "report.json")
    return report
