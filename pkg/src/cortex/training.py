"""Training loop, checkpoints, lambda sweeps and ablation grids."""
from __future__ import annotations

import contextlib
import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .decoder import Vocab
from .errors import ConfigurationError, InputError, TrainingError
from .evaluation import MetricReport, build_report, records_from_captions
from .itda import AlignmentLosses
from .model import CortexModel, ModelConfig, build_tensors, captions_from_ids, index_batch
from .text_encoding import EncoderSpec
from .toy_scene import ScenePair

log = logging.getLogger(__name__)

SWEEP_LAMBDAS = (1e-1, 1e-2, 1e-3, 1e-4)


@dataclass
class TrainConfig:
    lam: float = 1e-4
    lr: float = 1e-4
    batch_size: int = 8
    max_iters: int = 1000
    seed: int = 0
    use_rte: bool = True
    use_itda: bool = True
    use_l_sa: bool = True
    use_l_da: bool = True
    use_rte_memory: bool = True
    lambda_sweep: tuple[float, ...] = ()
    c: int = 64
    heads: int = 8
    layers: int = 2
    dropout: float = 0.1
    max_len: int = 20
    resolution: int = 40
    stride: int = 8
    grad_clip: float = 5.0
    val_every: int = 100
    encoder_seed: int = 0
    cap: int = 15
    dataset: str | None = None
    rte_path: str | None = None
    n_pairs: int = 512  # generated when no dataset file is given
    data_seed: int = 0

    def __post_init__(self):
        self.lambda_sweep = tuple(float(x) for x in self.lambda_sweep)
        self.validate()

    def validate(self) -> "TrainConfig":
        if self.lam < 0 or any(x < 0 for x in self.lambda_sweep):
            raise ConfigurationError("lambda must be non-negative")
        if self.use_itda and not self.use_rte:
            raise ConfigurationError("ITDA cannot run without RTE text (use_itda requires use_rte)")
        if self.batch_size < 1 or self.max_iters < 0 or self.lr <= 0:
            raise ConfigurationError("batch_size >= 1, max_iters >= 0 and lr > 0 required")
        if self.c % self.heads:
            raise ConfigurationError(f"c={self.c} not divisible by heads={self.heads}")
        return self

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lambda_sweep"] = list(self.lambda_sweep)
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size, self.c, self.heads, self.layers, self.max_len, self.dropout, self.stride,
                           self.use_rte, self.use_itda, self.use_rte_memory)

    def encoder_spec(self) -> EncoderSpec:
        return EncoderSpec("toy_hash", self.c, self.encoder_seed)

    # flat "key = value" text files -----------------------------------------
    def to_text(self) -> str:
        return "".join(f"{k} = {json.dumps(v)}\n" for k, v in self.to_dict().items())

    @classmethod
    def from_mapping(cls, values: Mapping[str, object], base: "TrainConfig | None" = None) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return dataclasses.replace(base or cls(), **values)


def parse_config_text(text: str) -> dict[str, object]:
    """Parse ``key = value`` lines; values are JSON when possible, else strings."""
    out: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key == "lambda":
            key = "lam"
        lowered = value.lower()
        if lowered in ("true", "on", "yes"):
            out[key] = True
        elif lowered in ("false", "off", "no"):
            out[key] = False
        elif lowered in ("null", "none"):
            out[key] = None
        else:
            try:
                out[key] = json.loads(value)
            except json.JSONDecodeError:
                if "," in value:
                    out[key] = [float(x) for x in value.strip("[]()").split(",") if x.strip()]
                else:
                    out[key] = value
    return out


def load_config(path: str | Path, base: TrainConfig | None = None) -> TrainConfig:
    return TrainConfig.from_mapping(parse_config_text(Path(path).read_text()), base)


def total_loss(l_cap, losses: AlignmentLosses, lam: float, use_l_sa: bool = True, use_l_da: bool = True):
    """``l_cap + lam * (l_sa + l_da)`` with disabled terms contributing exactly zero."""
    if lam < 0:
        raise ConfigurationError(f"lambda must be >= 0, got {lam}")
    align = 0.0
    if use_l_sa:
        align = align + losses.l_sa
    if use_l_da:
        align = align + losses.l_da
    if lam == 0 or (not use_l_sa and not use_l_da):
        return l_cap
    return l_cap + lam * align


# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: CortexModel
    vocab: Vocab
    config: TrainConfig
    log: list[dict]
    optimizer: torch.optim.Optimizer
    iteration: int

    @property
    def final_l_cap(self) -> float:
        return [r for r in self.log if "l_cap" in r][-1]["l_cap"]


@contextlib.contextmanager
def _flush_denormals():
    # Adam's second moments drift into subnormal range and slow CPU math ~5x.
    # The flag is process-global, so put back whatever was there before.
    np.finfo(np.float32), np.finfo(np.float64)  # cache limits before flushing
    was_on = torch.tensor(1e-310, dtype=torch.float64).item() == 0.0
    torch.set_flush_denormal(True)
    try:
        yield
    finally:
        torch.set_flush_denormal(was_on)


def _seed_all(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


def _batches(n: int, batch_size: int, gen: torch.Generator):
    while True:
        perm = torch.randperm(n, generator=gen)
        for i in range(0, n, batch_size):
            yield perm[i:i + batch_size]


def train(train_pairs: Sequence[ScenePair], cfg: TrainConfig, val_pairs: Sequence[ScenePair] = (), *,
          out_dir: str | Path | None = None, rte_index: Mapping | None = None, vocab: Vocab | None = None,
          dtype: torch.dtype = torch.float32) -> TrainResult:
    """Adam on ``L_cap + lambda * L_align`` over all trainable parameters."""
    cfg.validate()
    if not train_pairs:
        raise InputError("no training pairs")
    with _flush_denormals():
        return _train(train_pairs, cfg, val_pairs, out_dir, rte_index, vocab, dtype)


def _train(train_pairs, cfg, val_pairs, out_dir, rte_index, vocab, dtype) -> TrainResult:
    _seed_all(cfg.seed)
    vocab = vocab or Vocab.build(c for p in train_pairs for c in p.gt_captions)
    kw = dict(encoder=cfg.encoder_spec(), resolution=cfg.resolution, max_len=cfg.max_len,
              rte_index=rte_index, cap=cfg.cap, dtype=dtype)
    data = build_tensors(train_pairs, vocab, **kw)
    val_data = build_tensors(val_pairs, vocab, **kw) if val_pairs else None

    model = CortexModel(cfg.model_config(len(vocab))).to(dtype)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8)
    gen = torch.Generator().manual_seed(cfg.seed)
    batches = _batches(len(train_pairs), cfg.batch_size, gen)
    history: list[dict] = []
    out_dir = Path(out_dir) if out_dir is not None else None

    for it in range(1, cfg.max_iters + 1):
        model.train()
        idx = next(batches)
        batch = index_batch(data, idx)
        _, l_cap, losses = model(batch)
        l_total = total_loss(l_cap, losses, cfg.lam, cfg.use_l_sa, cfg.use_l_da)
        rec = {"iter": it, "l_cap": l_cap.item(), "l_sa": losses.l_sa.item(), "l_da": losses.l_da.item(),
               "l_total": l_total.item()}
        if not all(math.isfinite(v) for v in rec.values()):
            dump = {**rec, "pair_ids": [train_pairs[i].pair_id for i in idx.tolist()], "config": cfg.to_dict()}
            if out_dir is not None:
                out_dir.mkdir(parents=True, exist_ok=True)
                (out_dir / "nan_dump.json").write_text(json.dumps(dump, indent=2))
            raise TrainingError(f"non-finite loss at iteration {it}: {json.dumps(dump)}")
        opt.zero_grad(set_to_none=True)
        l_total.backward()
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        opt.step()
        history.append(rec)
        if val_data is not None and cfg.val_every and (it % cfg.val_every == 0 or it == cfg.max_iters):
            history.append({"iter": it, "val_l_cap": validation_loss(model, val_data, cfg.batch_size)})

    result = TrainResult(model, vocab, cfg, history, opt, cfg.max_iters)
    if out_dir is not None:
        save_checkpoint(result, out_dir)
        write_metrics_log(history, out_dir / "metrics.jsonl")
    return result


@torch.no_grad()
def validation_loss(model: CortexModel, data: Mapping[str, torch.Tensor], batch_size: int = 64) -> float:
    model.eval()
    n = data["captions"].shape[0]
    total, count = 0.0, 0
    for i in range(0, n, batch_size):
        idx = torch.arange(i, min(n, i + batch_size))
        batch = index_batch(data, idx)
        _, l_cap, _ = model(batch)
        tokens = int((batch["captions"][:, 1:] != 0).sum())
        total += float(l_cap) * tokens
        count += tokens
    return total / max(count, 1)


def write_metrics_log(history: Sequence[dict], path: str | Path) -> None:
    with open(path, "w") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# inference / evaluation


@torch.no_grad()
def caption_pairs(model: CortexModel, vocab: Vocab, cfg: TrainConfig, pairs: Sequence[ScenePair], *,
                  rte_index: Mapping | None = None, strategy: str = "greedy", k: int = 3,
                  batch_size: int = 64) -> list[str]:
    model.eval()
    dtype = next(model.parameters()).dtype
    data = build_tensors(pairs, vocab, encoder=cfg.encoder_spec(), resolution=cfg.resolution,
                         max_len=cfg.max_len, rte_index=rte_index, cap=cfg.cap, dtype=dtype)
    out = []
    for i in range(0, len(pairs), batch_size):
        batch = index_batch(data, torch.arange(i, min(len(pairs), i + batch_size)))
        out += captions_from_ids(model.caption(batch, strategy, k), vocab)
    return out


def evaluate_model(result: TrainResult, pairs: Sequence[ScenePair], *, rte_index: Mapping | None = None,
                   **meta) -> MetricReport:
    hyps = caption_pairs(result.model, result.vocab, result.config, pairs, rte_index=rte_index)
    report = build_report(records_from_captions(pairs, hyps), **meta)
    report.meta.setdefault("captions", {p.pair_id: h for p, h in zip(pairs, hyps)})
    return report


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_FORMAT = "cortex-checkpoint/1"


def _tensor_entries(result: TrainResult) -> list[tuple[str, torch.Tensor]]:
    entries = [(f"param.{k}", v) for k, v in result.model.state_dict().items()]
    names = {id(p): n for n, p in result.model.named_parameters()}
    for group in result.optimizer.param_groups:
        for p in group["params"]:
            state = result.optimizer.state.get(p)
            if not state:
                continue
            n = names[id(p)]
            entries.append((f"adam.exp_avg.{n}", state["exp_avg"]))
            entries.append((f"adam.exp_avg_sq.{n}", state["exp_avg_sq"]))
            entries.append((f"adam.step.{n}", torch.as_tensor(state["step"], dtype=torch.float64).reshape(1)))
    return entries


def save_checkpoint(result: TrainResult, directory: str | Path) -> Path:
    """Write ``weights.bin`` (raw little-endian tensors), ``checkpoint.json`` and ``vocab.txt``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"format": CHECKPOINT_FORMAT, "iteration": result.iteration, "config": result.config.to_dict(),
                "config_digest": result.config.digest(), "tensors": []}
    offset = 0
    with open(directory / "weights.bin", "wb") as fh:
        for name, t in _tensor_entries(result):
            arr = t.detach().cpu().numpy()
            dtype = arr.dtype.newbyteorder("<")
            data = np.ascontiguousarray(arr, dtype=dtype).tobytes()
            manifest["tensors"].append({"name": name, "shape": list(arr.shape), "dtype": dtype.str,
                                        "offset": offset, "nbytes": len(data)})
            fh.write(data)
            offset += len(data)
    (directory / "checkpoint.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    result.vocab.save(directory / "vocab.txt")
    return directory


def load_checkpoint(directory: str | Path) -> TrainResult:
    directory = Path(directory)
    manifest_path = directory / "checkpoint.json"
    if not manifest_path.exists():
        raise InputError(f"{directory} is not a checkpoint directory")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise InputError(f"unsupported checkpoint format {manifest.get('format')!r}")
    cfg = TrainConfig.from_mapping(manifest["config"])
    vocab = Vocab.load(directory / "vocab.txt")
    blob = (directory / "weights.bin").read_bytes()
    tensors = {}
    for e in manifest["tensors"]:
        arr = np.frombuffer(blob, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=np.int64)),
                            offset=e["offset"]).reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(arr.copy())
    params = {k[len("param."):]: v for k, v in tensors.items() if k.startswith("param.")}
    dtype = next(iter(params.values())).dtype
    model = CortexModel(cfg.model_config(len(vocab))).to(dtype)
    model.load_state_dict(params)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8)
    for n, p in model.named_parameters():
        if f"adam.exp_avg.{n}" in tensors:
            opt.state[p] = {"step": torch.tensor(float(tensors[f"adam.step.{n}"][0])),
                            "exp_avg": tensors[f"adam.exp_avg.{n}"].to(dtype),
                            "exp_avg_sq": tensors[f"adam.exp_avg_sq.{n}"].to(dtype)}
    model.eval()
    return TrainResult(model, vocab, cfg, [], opt, manifest["iteration"])


# ---------------------------------------------------------------------------
# sweeps and ablations


def sweep_lambdas(train_pairs, cfg: TrainConfig, eval_pairs, lambdas: Sequence[float] = SWEEP_LAMBDAS, *,
                  val_pairs=(), out_dir: str | Path | None = None, rte_index=None) -> dict[float, MetricReport]:
    """Train and score one run per lambda; checkpoints land in ``out_dir/lambda_<value>``."""
    reports = {}
    for lam in lambdas:
        sub = Path(out_dir) / f"lambda_{lam:g}" if out_dir is not None else None
        res = train(train_pairs, cfg.replace(lam=float(lam), lambda_sweep=()), val_pairs, out_dir=sub,
                    rte_index=rte_index)
        reports[float(lam)] = evaluate_model(res, eval_pairs, rte_index=rte_index, lam=float(lam), seed=cfg.seed)
        if sub is not None:
            (sub / "report.json").write_text(json.dumps(reports[float(lam)].to_dict(), indent=2, sort_keys=True))
    return reports


MODULE_ROWS = {
    "baseline": dict(use_rte=False, use_itda=False),
    "+RTE": dict(use_rte=True, use_itda=False),
    "+RTE+ITDA": dict(use_rte=True, use_itda=True),
}
LOSS_ROWS = {
    "no_sa/no_da": dict(use_l_sa=False, use_l_da=False),
    "sa/no_da": dict(use_l_sa=True, use_l_da=False),
    "no_sa/da": dict(use_l_sa=False, use_l_da=True),
    "sa/da": dict(use_l_sa=True, use_l_da=True),
}


def ablation_configs(base: TrainConfig) -> dict[str, dict[str, TrainConfig]]:
    """Module grid (3 rows) and loss grid (4 rows, RTE + ITDA on)."""
    modules = {name: base.replace(**flags) for name, flags in MODULE_ROWS.items()}
    losses = {name: base.replace(use_rte=True, use_itda=True, **flags) for name, flags in LOSS_ROWS.items()}
    return {"modules": modules, "losses": losses}


@dataclass
class AblationReport:
    seeds: list[int]
    modules: dict[str, list[MetricReport]] = field(default_factory=dict)
    losses: dict[str, list[MetricReport]] = field(default_factory=dict)

    def mean(self, table: str, row: str, metric: str = "cider") -> float:
        return float(np.mean([r.total[metric] for r in getattr(self, table)[row]]))

    def rows(self) -> list[dict]:
        out = []
        for table in ("modules", "losses"):
            for row, reports in getattr(self, table).items():
                for seed, rep in zip(self.seeds, reports):
                    out.append({"table": table, "row": row, "seed": seed, **{k: rep.total[k] for k in rep.total},
                                **{f"semantic_{k}": rep.semantic[k] for k in rep.semantic}})
        return out

    def to_tsv(self) -> str:
        rows = self.rows()
        if not rows:
            return ""
        keys = list(rows[0])
        return "\t".join(keys) + "\n" + "".join("\t".join(str(r[k]) for k in keys) + "\n" for r in rows)


def ablate(train_pairs, base: TrainConfig, eval_pairs, seeds: Sequence[int] = (0, 1, 2), *, val_pairs=(),
           rte_index=None) -> AblationReport:
    """Train every module-grid and loss-grid configuration once per seed.

    The full configuration appears in both grids and is trained only once.
    """
    grids = ablation_configs(base)
    report = AblationReport(list(seeds), {k: [] for k in grids["modules"]}, {k: [] for k in grids["losses"]})
    for seed in seeds:
        done: dict[str, MetricReport] = {}
        for table in ("modules", "losses"):
            for row, cfg in grids[table].items():
                cfg = cfg.replace(seed=seed)
                key = cfg.digest()
                if key not in done:
                    res = train(train_pairs, cfg, val_pairs, rte_index=rte_index)
                    done[key] = evaluate_model(res, eval_pairs, rte_index=rte_index, row=row, seed=seed)
                    log.info("ablation %s/%s seed=%d cider=%.3f", table, row, seed, done[key].cider)
                getattr(report, table)[row].append(done[key])
    return report
