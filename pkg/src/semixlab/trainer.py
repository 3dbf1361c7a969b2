"""Training loop: Adam updates, labeled-epoch scheduling with an
independently cycling unlabeled stream, per-epoch validation, model
selection on balanced accuracy (kappa tiebreak), and checkpointing.

Determinism: every random draw is derived from (seed, epoch, step) or
(seed, pass index), so replaying a config reproduces the history exactly and
methods that share a phase consume identical streams for it.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import losses as L
from .augment import TransformSpec, apply_array, sample_transform
from .dataset import Record, load_record_pair
from .evaluate import DegenerateLabels, balanced_accuracy, quadratic_kappa
from .network import NetworkConfig, SiameseGrader, backward, init_params, \
    save_checkpoint

METHODS = ("supervised", "mixup", "pi", "ict", "mixmatch", "semixup")


class NonFiniteGradient(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    method: str = "semixup"
    lr: float = 1e-4
    batch_size: int = 40
    epochs: int = 500
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    alpha: float = 0.75
    seed: int = 0
    pi_weight: float = 1.0
    ict_max_weight: float = 100.0
    ict_ramp_epochs: int = 80
    mixmatch_weight: float = 10.0
    mixmatch_temperature: float = 0.5
    class_norm: bool = True
    augment: bool = True
    val_every: int = 1
    dtype: str = "float32"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")


@dataclass
class HistoryRow:
    epoch: int
    total: float
    supervised: float
    term_in: float
    term_out: float
    term_ic: float
    val_ba: float
    val_kc: float
    checkpoint: str = ""


@dataclass
class History:
    rows: list[HistoryRow] = field(default_factory=list)

    def to_csv(self, path: str | Path) -> None:
        fields = list(HistoryRow.__dataclass_fields__)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(fields)
            for row in self.rows:
                writer.writerow([getattr(row, f) for f in fields])

    @property
    def best_epoch(self) -> int:
        best = max(self.rows, key=lambda r: (r.val_ba, r.val_kc, -r.epoch))
        return best.epoch


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    m: dict[str, torch.Tensor]
    v: dict[str, torch.Tensor]
    t: int = 0

    @classmethod
    def init(cls, params: dict[str, torch.Tensor]) -> "AdamState":
        return cls(m={k: torch.zeros_like(p) for k, p in params.items()},
                   v={k: torch.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor],
              state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """Standard bias-corrected Adam, no weight decay. Mutates params/state."""
    for name, gr in grads.items():
        if gr is not None and not bool(torch.isfinite(gr).all()):
            raise NonFiniteGradient(f"non-finite gradient in {name}")
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    with torch.no_grad():
        for name, p in params.items():
            gr = grads.get(name)
            if gr is None:
                gr = torch.zeros_like(p)
            m = state.m[name]
            v = state.v[name]
            m.mul_(beta1).add_(gr, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(gr, gr, value=1.0 - beta2)
            p.data -= lr * (m / bc1) / ((v / bc2).sqrt() + eps)
    return state


# ---------------------------------------------------------------------------
# data streams

class _ShuffledStream:
    """Endless stream over indices; reshuffles independently each pass."""

    def __init__(self, n: int, seed: int):
        self.n = n
        self.seed = seed
        self.pass_idx = -1
        self.pos = 0
        self.order = np.empty(0, dtype=np.int64)
        self._new_pass()

    def _new_pass(self):
        self.pass_idx += 1
        rng = np.random.default_rng([self.seed, 202, self.pass_idx])
        self.order = rng.permutation(self.n)
        self.pos = 0

    def take(self, k: int) -> np.ndarray:
        out = []
        while len(out) < k:
            if self.pos >= self.n:
                self._new_pass()
            out.append(self.order[self.pos])
            self.pos += 1
        return np.asarray(out, dtype=np.int64)


def _load_stack(records: list[Record], loader) -> np.ndarray:
    return np.stack([loader(r) for r in records])


def _derived_torch_seed(*key: int) -> int:
    state = np.random.SeedSequence(key).generate_state(1, np.uint64)[0]
    return int(state & np.uint64(0x7FFF_FFFF_FFFF_FFFF))


def predict_probs(net: SiameseGrader, arrays: np.ndarray,
                  batch_size: int = 128) -> np.ndarray:
    """Eval-mode softmax outputs, unaugmented, batched."""
    dtype = next(net.parameters()).dtype
    out = []
    with torch.no_grad():
        for i in range(0, len(arrays), batch_size):
            x = torch.from_numpy(
                np.ascontiguousarray(arrays[i:i + batch_size])).to(dtype)
            out.append(torch.softmax(net(x, train=False), dim=-1).numpy())
    return np.concatenate(out).astype(np.float64)


def _step_loss(cfg: TrainConfig, net, labeled_batch, unlabeled_batch, epoch,
               rng, spec, g):
    if cfg.method == "supervised":
        return L.supervised_ce_loss(net, labeled_batch, train=True, g=g)
    if cfg.method == "mixup":
        return L.mixup_supervised_loss(net, labeled_batch, rng, cfg.alpha,
                                       train=True, g=g)
    if cfg.method == "pi":
        return L.pi_model_loss(net, labeled_batch, unlabeled_batch,
                               cfg.pi_weight, rng, transform_spec=spec,
                               train=True, g=g, class_norm=cfg.class_norm)
    if cfg.method == "ict":
        return L.ict_loss(net, labeled_batch, unlabeled_batch, epoch, rng,
                          cfg.alpha, cfg.ict_max_weight, cfg.ict_ramp_epochs,
                          train=True, g=g, class_norm=cfg.class_norm)
    if cfg.method == "mixmatch":
        return L.mixmatch_loss(net, labeled_batch, unlabeled_batch, rng,
                               cfg.alpha, cfg.mixmatch_temperature,
                               cfg.mixmatch_weight, transform_spec=spec,
                               train=True, g=g, class_norm=cfg.class_norm)
    return L.semixup_batch_loss(net, labeled_batch, unlabeled_batch,
                                cfg.weights, rng, cfg.alpha,
                                transform_spec=spec, train=True, g=g,
                                class_norm=cfg.class_norm)


def train(config: TrainConfig, net_config: NetworkConfig,
          labeled: list[Record], unlabeled: list[Record], val: list[Record],
          run_dir: str | Path | None = None, loader=load_record_pair,
          ) -> tuple[SiameseGrader, History]:
    """Train one model; returns (net restored to its best epoch, history).

    The unsupervised stream runs over labeled + unlabeled records (grades
    unused); an epoch is one pass over the labeled data. Per-step rng is
    derived from (seed, epoch, step): first the labeled-batch augmentation
    draws, then the method's own draws, so methods that degenerate into one
    another consume identical streams.
    """
    for r in labeled:
        if r.grade is None:
            raise ValueError(f"labeled record {r.id} has no grade")

    x_l_all = _load_stack(labeled, loader)
    y_l_all = np.asarray([r.grade for r in labeled], dtype=np.int64)
    x_ul_all = np.concatenate(
        [x_l_all, _load_stack(unlabeled, loader)]) if unlabeled else x_l_all
    x_val = _load_stack(val, loader) if val else None
    y_val = np.asarray([r.grade for r in val], dtype=np.int64) if val else None

    torch_dtype = torch.float64 if config.dtype == "float64" else torch.float32
    net = init_params(net_config, config.seed)
    if torch_dtype is torch.float64:
        net.double()
    params = dict(net.named_parameters())
    state = AdamState.init(params)

    size = net_config.input_size
    aug_spec = TransformSpec.default(crop_size=size) if config.augment \
        else TransformSpec.identity(size)
    n_labeled = len(labeled)
    steps_per_epoch = math.ceil(n_labeled / config.batch_size)
    ul_stream = _ShuffledStream(len(x_ul_all), config.seed)

    history = History()
    step_rows = []
    best_key = None
    best_state = None
    best_epoch = -1

    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed, 101, epoch]).permutation(n_labeled)
        sums = np.zeros(5)
        for step in range(steps_per_epoch):
            idx = order[step * config.batch_size:(step + 1) * config.batch_size]
            rng = np.random.default_rng([config.seed, 303, epoch, step])
            g = torch.Generator().manual_seed(
                _derived_torch_seed(config.seed, epoch, step))

            x_l = np.stack([
                apply_array(sample_transform(rng, aug_spec), x_l_all[i])
                for i in idx]).astype(x_l_all.dtype)
            y_l = y_l_all[idx]
            x_u = x_ul_all[ul_stream.take(len(idx))]

            total, report = _step_loss(config, net, (x_l, y_l), x_u, epoch,
                                       rng, aug_spec, g)
            grads = backward(net, total)
            try:
                adam_step(params, grads, state, config.lr)
            except NonFiniteGradient as exc:
                raise NonFiniteGradient(
                    f"epoch {epoch} step {step}: {exc}") from None

            step_rows.append((epoch, step, report.total, report.supervised,
                              report.term_in, report.term_out, report.term_ic))
            sums += (report.total, report.supervised, report.term_in,
                     report.term_out, report.term_ic)

        means = sums / steps_per_epoch
        val_ba = val_kc = float("nan")
        last = epoch == config.epochs - 1
        if x_val is not None and (epoch % config.val_every == 0 or last):
            probs = predict_probs(net, x_val)
            preds = probs.argmax(axis=1)
            val_ba = balanced_accuracy(y_val, preds)
            try:
                val_kc = quadratic_kappa(y_val, preds)
            except DegenerateLabels:
                val_kc = 0.0
            key = (val_ba, val_kc, -epoch)
            if best_key is None or key > best_key:
                best_key = key
                best_epoch = epoch
                best_state = {k: v.detach().clone()
                              for k, v in net.state_dict().items()}

        history.rows.append(HistoryRow(
            epoch=epoch, total=means[0], supervised=means[1],
            term_in=means[2], term_out=means[3], term_ic=means[4],
            val_ba=val_ba, val_kc=val_kc))

    if best_state is not None:
        net.load_state_dict(best_state)

    if run_dir is not None:
        run_dir = Path(run_dir)
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        ckpt_path = run_dir / "checkpoints" / "best.ckpt"
        meta = {"epoch": best_epoch, "method": config.method,
                "val_ba": best_key[0] if best_key else None,
                "val_kc": best_key[1] if best_key else None}
        save_checkpoint(ckpt_path, net, meta)
        if best_epoch >= 0:
            for row in history.rows:
                if row.epoch == best_epoch:
                    row.checkpoint = str(ckpt_path)
        cfg_json = {"train": asdict(config), "net": asdict(net_config)}
        (run_dir / "config.json").write_text(json.dumps(cfg_json, indent=2))
        history.to_csv(run_dir / "history.csv")
        with open(run_dir / "steps.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "step", "total", "supervised",
                             "term_in", "term_out", "term_ic"])
            writer.writerows(step_rows)

    return net, history
