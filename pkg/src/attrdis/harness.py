"""Training runs, multi-seed comparisons and run-directory I/O."""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import analysis as A
from . import datagen as dg
from . import disentangle as G
from . import model as M
from . import numcore as nc
from .config import RunConfig, parse_config
from .datagen import format_float

log = logging.getLogger(__name__)

RUN_FILES = ("config.resolved", "metrics.csv", "per_attribute.csv", "anchors.csv", "mi.csv",
             "history.csv", "predictions.txt", "checkpoint.txt")


class NumericFailure(RuntimeError):
    def __init__(self, msg: str, epoch: int, step: int):
        super().__init__(f"{msg} (epoch {epoch}, step {step})")
        self.epoch = epoch
        self.step = step


@dataclass
class RunRecord:
    config: RunConfig
    config_hash: str
    seed: int
    # (epoch, lr, mean training objective over the epoch, clean-path BCE on the train split after it)
    history: list[tuple[int, float, float, float]]
    step_losses: list[float]
    params: M.ModelParams
    initial_params: M.ModelParams
    posteriors: dict[str, np.ndarray]
    labels: dict[str, np.ndarray]
    metrics: dict[str, A.MetricsReport]
    anchors: np.ndarray
    mi: A.MIEstimate | None
    corr_shift: list[dg.PairShift]
    branch_counts: dict[str, int]
    steps: int
    wall_clock: float = 0.0
    test_parts: np.ndarray | None = field(default=None, repr=False)

    @property
    def test_mA(self) -> float:
        return self.metrics["test"].mA


def _rngs(seed: int):
    ss = np.random.SeedSequence(seed)
    init, shuffle, draws, probe = ss.spawn(4)
    # MI probes take an integer seed so it can be combined with the feature index
    return init, np.random.default_rng(shuffle), np.random.default_rng(draws), int(probe.generate_state(1)[0])


def make_data(cfg: RunConfig) -> tuple[dg.Dataset, dg.Dataset]:
    d = cfg.data
    return dg.make_shifted_splits(d.scene("train"), d.scene("test"), d.n_train, d.n_test, cfg.seed)


def train_run(cfg: RunConfig, data: tuple[dg.Dataset, dg.Dataset] | None = None) -> RunRecord:
    """Train one model and evaluate it.  Deterministic given the config."""
    t0 = time.perf_counter()
    train, test = data if data is not None else make_data(cfg)
    tc = cfg.train
    init_seed, shuffle_rng, draw_rng, probe_seed = _rngs(cfg.seed)
    params = M.init_params(cfg.dims, init_seed)
    initial = params.copy()
    state = nc.AdamState(lr=tc.lr, beta1=tc.beta1, beta2=tc.beta2, eps=tc.eps)
    history, step_losses = [], []
    counts: dict[str, int] = {}
    n, bs, C = train.n, tc.batch_size, train.C
    step = 0
    for epoch in range(tc.epochs):
        lr = nc.multistep_lr(tc.lr, tc.milestones, epoch, tc.decay)
        perm = shuffle_rng.permutation(n)
        losses = []
        for start in range(0, n, bs):
            idx = perm[start:start + bs]
            if len(idx) < 2:
                continue
            batch = G.Batch(train.x[idx], train.labels[idx])
            draws = None
            if tc.mode != "baseline":
                draws = (G.degenerate_draws(len(idx), C) if tc.degenerate_draws
                         else G.draw_transforms(len(idx), C, draw_rng))
            leaves = params.leaves()
            try:
                with nc.Tape() as tape:
                    loss = G.total_loss(batch, leaves, draws, tc.mode, tc.lam, tc.ndsi, counts)
                tape.backward(loss)
            except nc.NonFiniteError as err:
                raise NumericFailure(str(err), epoch, step) from err
            grads = {k: v.grad if v.grad is not None else np.zeros_like(v.data) for k, v in leaves.items()}
            arrays, state = nc.adam_step(params.arrays, grads, state, lr)
            params = M.ModelParams(params.dims, arrays)
            losses.append(loss.item())
            step_losses.append(loss.item())
            step += 1
        clean = nc.op_bce(M.predict(train.x, params), train.labels.astype(np.float64)).item()
        history.append((epoch, lr, float(np.mean(losses)) if losses else float("nan"), clean))
        log.debug("epoch %d lr %.3g objective %.6f train bce %.6f", epoch, lr, history[-1][2], clean)
    record = evaluate(cfg, params, train, test, probe_seed)
    record.history, record.step_losses = history, step_losses
    record.initial_params, record.branch_counts, record.steps = initial, counts, step
    record.wall_clock = time.perf_counter() - t0
    return record


def evaluate(cfg: RunConfig, params: M.ModelParams, train: dg.Dataset, test: dg.Dataset,
             probe_seed=None) -> RunRecord:
    if probe_seed is None:
        probe_seed = _rngs(cfg.seed)[3]
    thr = cfg.eval.threshold
    posteriors = {"train": M.predict(train.x, params), "test": M.predict(test.x, params)}
    labels = {"train": train.labels, "test": test.labels}
    metrics = {s: A.metrics_report(posteriors[s], labels[s], thr) for s in ("train", "test")}
    parts = M.features(test.x, params)
    mi = A.mi_table(parts, test.labels, cfg.eval.mi_bins, probe_seed) if cfg.eval.mi else None
    shift = dg.correlation_shift(dg.pearson_matrix(train.labels), dg.pearson_matrix(test.labels))
    return RunRecord(cfg, cfg.config_hash(), cfg.seed, [], [], params, params, posteriors, labels,
                     metrics, M.anchor_cosine_matrix(params), mi, shift, {}, 0, test_parts=parts)


# -- run directory -------------------------------------------------------------------

def history_csv(history) -> str:
    lines = ["epoch,lr,objective,train_bce"]
    lines += [",".join([str(e)] + [format_float(v) for v in rest]) for e, *rest in history]
    return "\n".join(lines) + "\n"


def predictions_text(posteriors: dict[str, np.ndarray], labels: dict[str, np.ndarray]) -> str:
    out = ["split\tindex\tlabels\tposteriors"]
    for split in ("train", "test"):
        for i, (lab, p) in enumerate(zip(labels[split], posteriors[split])):
            bits = "".join("1" if b else "0" for b in lab)
            out.append(f"{split}\t{i}\t{bits}\t" + ",".join(format_float(v) for v in p))
    return "\n".join(out) + "\n"


def parse_predictions(text: str) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    post: dict[str, list] = {}
    labs: dict[str, list] = {}
    for line in text.splitlines()[1:]:
        split, _, bits, vals = line.split("\t")
        post.setdefault(split, []).append([float(v) for v in vals.split(",")])
        labs.setdefault(split, []).append([b == "1" for b in bits])
    return ({k: np.array(v) for k, v in post.items()},
            {k: np.array(v, dtype=np.uint8) for k, v in labs.items()})


def derived_csvs(cfg: RunConfig, posteriors, labels, params: M.ModelParams, mi: A.MIEstimate | None) -> dict[str, str]:
    thr = cfg.eval.threshold
    reports = {s: A.metrics_report(posteriors[s], labels[s], thr) for s in ("train", "test")}
    out = {"metrics.csv": A.metrics_csv(reports), "per_attribute.csv": A.per_attribute_csv(reports),
           "anchors.csv": A.matrix_csv(M.anchor_cosine_matrix(params))}
    out["mi.csv"] = A.mi_csv(mi) if mi is not None else ",".join(A.MI_HEADER) + "\n"
    return out


def write_run(record: RunRecord, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = derived_csvs(record.config, record.posteriors, record.labels, record.params, record.mi)
    files["config.resolved"] = record.config.to_yaml()
    files["history.csv"] = history_csv(record.history)
    files["predictions.txt"] = predictions_text(record.posteriors, record.labels)
    for name, text in files.items():
        (out / name).write_text(text, encoding="ascii")
    M.save_checkpoint(record.params, out / "checkpoint.txt", record.seed, record.steps)
    return out


def load_run_config(run_dir) -> RunConfig:
    import yaml
    return parse_config(yaml.safe_load(Path(run_dir, "config.resolved").read_text()))


def analyze(run_dir, recompute_mi: bool = True) -> dict[str, str]:
    """Recompute every derived CSV from the persisted predictions and checkpoint.

    Metrics come from ``predictions.txt``; anchors from ``checkpoint.txt``;
    the MI table is re-estimated from checkpoint features on the regenerated
    test split (generation is deterministic in the config).
    """
    run_dir = Path(run_dir)
    cfg = load_run_config(run_dir)
    posteriors, labels = parse_predictions((run_dir / "predictions.txt").read_text())
    params, _, _ = M.load_checkpoint(run_dir / "checkpoint.txt")
    mi = None
    if cfg.eval.mi and recompute_mi:
        _, test = make_data(cfg)
        mi = A.mi_table(M.features(test.x, params), test.labels, cfg.eval.mi_bins, _rngs(cfg.seed)[3])
    out = derived_csvs(cfg, posteriors, labels, params, mi)
    if cfg.eval.mi and not recompute_mi:
        out.pop("mi.csv")
    return out


def audit(run_dir) -> list[str]:
    """Names of files whose recomputation does not match byte for byte."""
    run_dir = Path(run_dir)
    cfg = load_run_config(run_dir)
    mismatches = []
    for name, text in analyze(run_dir).items():
        if (run_dir / name).read_text() != text:
            mismatches.append(name)
    # predictions must also follow from the checkpoint and the regenerated data
    params, _, _ = M.load_checkpoint(run_dir / "checkpoint.txt")
    train, test = make_data(cfg)
    post = {"train": M.predict(train.x, params), "test": M.predict(test.x, params)}
    text = predictions_text(post, {"train": train.labels, "test": test.labels})
    if (run_dir / "predictions.txt").read_text() != text:
        mismatches.append("predictions.txt")
    return mismatches


# -- comparisons ------------------------------------------------------------------------

@dataclass
class Comparison:
    records: dict[str, list[RunRecord]]
    seeds: list[int]

    def rows(self) -> list[dict]:
        out = []
        for mode, recs in self.records.items():
            for r in recs:
                out.append(summary_row(mode, r))
        return out

    def aggregate(self) -> dict[str, dict[str, tuple[float, float]]]:
        agg = {}
        for mode, recs in self.records.items():
            rows = [summary_row(mode, r) for r in recs]
            agg[mode] = {k: (float(np.mean([x[k] for x in rows])), float(np.std([x[k] for x in rows])))
                         for k in SUMMARY_KEYS}
        return agg

    def paired_diffs(self, reference: str = "baseline", key: str = "test_mA") -> dict[str, list[float]]:
        if reference not in self.records:
            return {}
        ref = [summary_row(reference, r)[key] for r in self.records[reference]]
        return {mode: [summary_row(mode, r)[key] - b for r, b in zip(recs, ref)]
                for mode, recs in self.records.items()}

    def mean(self, mode: str, key: str) -> float:
        return self.aggregate()[mode][key][0]


SUMMARY_KEYS = ("test_mA", "test_recall", "test_f1", "test_precision", "train_mA",
                "mi_off_target", "mi_on_target", "mi_null", "anchor_offdiag")


def summary_row(arm: str, r: RunRecord) -> dict:
    te, tr = r.metrics["test"], r.metrics["train"]
    return {
        "arm": arm, "seed": r.seed, "config_hash": r.config_hash,
        "test_mA": te.mA, "test_recall": te.recall, "test_f1": te.f1, "test_precision": te.precision,
        "train_mA": tr.mA,
        "mi_off_target": r.mi.off_target_mean() if r.mi else float("nan"),
        "mi_on_target": r.mi.on_target_mean() if r.mi else float("nan"),
        "mi_null": r.mi.null_mean() if r.mi else float("nan"),
        "anchor_offdiag": M.mean_abs_offdiag(r.anchors),
    }


def rows_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    keys = list(rows[0])
    lines = [",".join(keys)]
    for row in rows:
        lines.append(",".join(format_float(v) if isinstance(v, float) else str(v) for v in row.values()))
    return "\n".join(lines) + "\n"


def _variant(cfg: RunConfig, seed: int, **train_overrides) -> RunConfig:
    d = cfg.model_dump(mode="json")
    d["seed"] = seed
    d["train"].update(train_overrides)
    return parse_config(d)


def _run_task(cfg_json: dict) -> RunRecord:
    return train_run(parse_config(cfg_json))


def run_many(configs: list[RunConfig], workers: int = 1) -> list[RunRecord]:
    """Independent runs, optionally over a bounded process pool; order preserved."""
    if workers <= 1 or len(configs) <= 1:
        return [train_run(c) for c in configs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_task, [c.model_dump(mode="json") for c in configs]))


def compare_modes(cfg: RunConfig, modes, n_seeds: int, workers: int = 1) -> Comparison:
    modes = list(modes)
    if not modes or n_seeds < 1:
        raise ValueError("compare_modes needs at least one mode and one seed")
    seeds = [cfg.seed + k for k in range(n_seeds)]
    arms = {}
    for i, mode in enumerate(modes):
        # a repeated mode gets its own arm label
        arms[mode if mode not in arms else f"{mode}#{i}"] = mode
    configs = [_variant(cfg, s, mode=m) for m in arms.values() for s in seeds]
    records = run_many(configs, workers)
    out, k = {}, 0
    for arm in arms:
        out[arm] = records[k:k + n_seeds]
        k += n_seeds
    return Comparison(out, seeds)


def ablate_ndsi(cfg: RunConfig, n_seeds: int, workers: int = 1) -> Comparison:
    if cfg.data.norm_jitter <= 0:
        raise ValueError("NDSI ablation needs data.norm_jitter > 0")
    arms = {"eq3+ndsi": dict(mode="eq3", ndsi=True), "eq3-ndsi": dict(mode="eq3", ndsi=False),
            "eq4+ndsi": dict(mode="eq4", ndsi=True), "eq4-ndsi": dict(mode="eq4", ndsi=False)}
    seeds = [cfg.seed + k for k in range(n_seeds)]
    configs = [_variant(cfg, s, **kw) for kw in arms.values() for s in seeds]
    records = run_many(configs, workers)
    return Comparison({arm: records[i * n_seeds:(i + 1) * n_seeds] for i, arm in enumerate(arms)}, seeds)


def robust_group_eval(record: RunRecord, train: dg.Dataset, test: dg.Dataset, group,
                      seed: int = 0) -> dict[str, float]:
    """Test group accuracy of plain thresholding and the two rectified variants.

    Robust-A trains a softmax head on the frozen summed feature of the train
    split; Robust-B keeps the most confident group member.
    """
    group = list(group)
    thr = record.config.eval.threshold
    post = record.posteriors["test"]
    head = A.robust_a_head(M.features(train.x, record.params).sum(axis=1), train.labels, group, seed=seed)
    f_test = record.test_parts.sum(axis=1) if record.test_parts is not None else \
        M.features(test.x, record.params).sum(axis=1)
    return {
        "plain": A.group_accuracy((post > thr).astype(np.uint8), test.labels, group),
        "robust_a": A.group_accuracy(head.apply(f_test, post > thr), test.labels, group),
        "robust_b": A.group_accuracy(A.robust_b_rectify(post, group, thr), test.labels, group),
    }


def default_workers() -> int:
    return max(1, min(4, os.cpu_count() or 1))
