"""End-to-end training loop, experiments, and run artifacts.

One logical thread owns parameters and random streams. Per batch: forward to
the insertion stage, both regularizer losses, per-sample channel drops,
attention reweighting, margin loss, weighted total, backward, momentum SGD.
Runs are bit-reproducible from (config, seeds) at 64-bit precision.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import Insertion, MarginHead, StagedBackbone, margin_loss
from .checkpoint import save_checkpoint
from .config import ExperimentConfig
from .data import Dataset, generate_synthetic, load_directory
from .errors import ConfigError, ContractError, NumericError
from .lcd import GammaPolicy, sample_mask
from .metrics import (
    OccludedTestSpec,
    build_occluded_split,
    build_pairs,
    rank1_identification,
    tar_at_far,
    write_metrics_csv,
)
from .sam import SamParams
from .spatial_reg import (
    FilterBank,
    ResponseSet,
    filter_orthogonal_loss,
    mean_abs_pairwise_response_cosine,
    response_orthogonal_loss,
)
from .strategies import DropBlock, WeightedChannelDropout, build_strategy
from .tensor import Tensor, set_default_dtype

log = logging.getLogger(__name__)

RUN_CSV_HEADER = "step,epoch,loss_total,loss_id,loss_filter,loss_response,lr,seed_fingerprint"


@dataclass
class StepRow:
    step: int
    epoch: int
    loss_total: float
    loss_id: float
    loss_filter: float
    loss_response: float
    lr: float


@dataclass
class RunRecord:
    steps: list
    metrics: dict
    checkpoint_path: str
    run_dir: str
    wall_clock: float
    seed_fingerprint: str
    config_fingerprint: str
    parameter_count: int
    sam_parameter_count: int


class MomentumSGD:
    """Classical momentum: v <- mu*v + g; p <- p - lr*v.

    An optional global gradient-norm clip tames the early transient of
    heavily weighted regularizers whose gradients dwarf the weights; once
    gradients shrink below the clip this is plain momentum SGD.
    """

    def __init__(self, params: dict, momentum: float = 0.9, clip_norm: float = 0.0):
        self.params = params
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.velocity = {name: np.zeros_like(t.data) for name, t in params.items()}

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def step(self, lr: float) -> None:
        scale = 1.0
        if self.clip_norm > 0.0:
            sq = 0.0
            for t in self.params.values():
                if t.grad is not None:
                    sq += float(np.sum(t.grad * t.grad))
            gnorm = np.sqrt(sq)
            if gnorm > self.clip_norm:
                scale = self.clip_norm / gnorm
        for name, t in self.params.items():
            if t.grad is None:
                continue
            v = self.velocity[name]
            v *= self.momentum
            v += t.grad if scale == 1.0 else t.grad * scale
            t.data -= lr * v


def _stash_clipped(reg_steps: dict, tensors: dict, clip: float) -> None:
    """Accumulate the tensors' current grads, rescaled to the clip budget."""
    sq = sum(float(np.sum(t.grad * t.grad)) for t in tensors.values() if t.grad is not None)
    gnorm = np.sqrt(sq)
    scale = min(1.0, clip / gnorm) if gnorm > 0 else 1.0
    for name, t in tensors.items():
        if t.grad is None:
            continue
        if name in reg_steps:
            reg_steps[name][1] = reg_steps[name][1] + t.grad * scale
        else:
            reg_steps[name] = [t, t.grad * scale]


def lr_at(train_cfg, epoch: int) -> float:
    lr = train_cfg.lr
    for point in train_cfg.decay_points:
        if epoch >= int(point * train_cfg.epochs):
            lr *= train_cfg.decay_factor
    return lr


def resolve_gamma_policy(cfg: ExperimentConfig, channels: int) -> GammaPolicy:
    gmin = cfg.lcd.gamma_min if cfg.lcd.gamma_min >= 0 else int(0.1 * channels)
    gmax = cfg.lcd.gamma_max if cfg.lcd.gamma_max >= 0 else int(0.6 * channels)
    seed = cfg.lcd.seed if cfg.lcd.seed >= 0 else cfg.seed.dropout
    policy = GammaPolicy(gamma_min=gmin, gamma_max=gmax, rng_seed=seed)
    policy.validate_for_channels(channels)
    return policy


def build_model(cfg: ExperimentConfig, rng: np.random.Generator):
    """Backbone + insertion + head, consuming the init stream in fixed order."""
    model = StagedBackbone(
        rng,
        image_size=cfg.data.image_size,
        in_channels=1,
        width_base=cfg.model.width_base,
        embedding_dim=cfg.model.embedding_dim,
        bn_epsilon=cfg.bn.epsilon,
        bn_momentum=cfg.bn.momentum,
    )
    model.reg_tap = cfg.reg.tap
    stage = cfg.lcd.stage
    if stage not in (1, 2, 3, 4):
        raise ConfigError(f"unknown stage {stage}; valid stages are 1..4")
    channels = model.stage_channels(stage)
    if cfg.reg.init == "orthogonal":
        from .backbone import orthogonal_column_init

        conv = model.stages[stage - 1].conv2
        conv.weight.data = orthogonal_column_init(
            rng, channels, channels, conv.weight.shape[2], cfg.reg.column_mode
        )
    name = cfg.strategy.name
    lcd_policy = None
    feature_strategy = None
    if name == "lcd":
        lcd_policy = resolve_gamma_policy(cfg, channels)
    elif name == "dropblock":
        feature_strategy = DropBlock(cfg.dropblock.block_size, cfg.dropblock.drop_prob)
    elif name == "wcd":
        feature_strategy = WeightedChannelDropout(cfg.wcd.keep_ratio)
    sam = None
    if cfg.sam.enabled:
        sam = SamParams.create(
            channels,
            model.stage_spatial(stage),
            model.stage_spatial(stage),
            rng,
            c_mid=cfg.sam.c_mid,
            hidden=cfg.sam.hidden,
            squash=cfg.sam.squash,
        )
    if lcd_policy is not None or feature_strategy is not None or sam is not None:
        order = cfg.lcd.order if lcd_policy is not None else "bn_then_lcd"
        if order == "lcd_then_maskedbn" and cfg.reg.tap == "after_norm":
            log.info("reg tap falls back to the conv output under lcd_then_maskedbn")
        model.insertion = Insertion(
            stage=stage,
            lcd=lcd_policy,
            order=order,
            sam=sam,
            feature_strategy=feature_strategy,
        )
    head = MarginHead.create(
        rng,
        num_ids=cfg.data.num_ids,
        dim=cfg.model.embedding_dim,
        margin=cfg.head.margin,
        scale=cfg.head.scale,
    )
    return model, head


def build_image_strategy(cfg: ExperimentConfig):
    if cfg.strategy.name == "cutout":
        return build_strategy("cutout", box_size=cfg.cutout.box_size)
    if cfg.strategy.name == "image_template":
        return build_strategy(
            "image_template",
            size_min=cfg.template.size_min,
            size_max=cfg.template.size_max,
            fill=cfg.template.fill,
        )
    return None


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    if cfg.data.root:
        return load_directory(cfg.data.root, cfg.data.image_size)
    return generate_synthetic(
        cfg.data.num_ids, cfg.data.images_per_id, cfg.data.image_size, cfg.seed.data
    )


def all_parameters(model: StagedBackbone, head: MarginHead) -> dict:
    params = dict(model.named_parameters())
    params["head.class_weights"] = head.class_weights
    return params


def embed_images(model: StagedBackbone, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
    chunks = []
    for lo in range(0, len(images), batch_size):
        emb, _ = model.forward(Tensor(images[lo : lo + batch_size]), training=False)
        chunks.append(emb.data.copy())
    return np.concatenate(chunks)


def _gallery_probe_split(labels: np.ndarray):
    """First test image of each identity enrolls the gallery; the rest probe."""
    gallery, probe = [], []
    seen = set()
    for i, label in enumerate(labels):
        if label not in seen:
            seen.add(label)
            gallery.append(i)
        else:
            probe.append(i)
    if not probe:
        raise ContractError(
            "identification eval needs at least one identity with two test images"
        )
    return np.asarray(gallery, dtype=int), np.asarray(probe, dtype=int)


def evaluate_model(model: StagedBackbone, dataset: Dataset, cfg: ExperimentConfig):
    """Rank-1 and accept-rate metrics on the clean and occluded test splits."""
    test_x, test_y = dataset.test_split()
    occl_sets = []
    for draw in range(max(1, cfg.eval.occl_draws)):
        spec = OccludedTestSpec(
            fraction_min=cfg.eval.occl_min,
            fraction_max=cfg.eval.occl_max,
            fill=cfg.eval.fill,
            seed=cfg.seed.data + 7 + draw,
        )
        occl_sets.append(build_occluded_split(test_x, spec)[0])
    emb_clean = embed_images(model, test_x)
    emb_occl_sets = [embed_images(model, occl_x) for occl_x in occl_sets]
    emb_occl = emb_occl_sets[0]
    gal, probe = _gallery_probe_split(test_y)
    values = {
        "rank1_clean": rank1_identification(
            emb_clean[gal], test_y[gal], emb_clean[probe], test_y[probe]
        ),
        "rank1_occluded": float(
            np.mean(
                [
                    rank1_identification(
                        emb_clean[gal], test_y[gal], emb[probe], test_y[probe]
                    )
                    for emb in emb_occl_sets
                ]
            )
        ),
    }
    rows = []
    fp = cfg.seed_fingerprint()
    rows.append(("rank1", "clean", values["rank1_clean"], None, fp))
    rows.append(("rank1", "occluded", values["rank1_occluded"], None, fp))
    pair_rng = np.random.default_rng([cfg.seed.data, 8])
    for split, emb_b in (("clean", emb_clean), ("occluded", emb_occl)):
        pairs = build_pairs(
            np.concatenate([emb_clean, emb_b]),
            np.concatenate([test_y, test_y]),
            genuine=cfg.eval.genuine_pairs,
            impostor=cfg.eval.impostor_pairs,
            rng=pair_rng,
            provenance=split,
        )
        for point in tar_at_far(pairs, cfg.eval.far_targets):
            name = f"tar@far={point.far_target:g}" + ("" if point.resolvable else "(unresolvable)")
            rows.append((name, split, point.tar, point.threshold, fp))
            values[f"tar_{split}_{point.far_target:g}"] = point.tar
    return rows, values


def measure_response_cosine(model: StagedBackbone, images: np.ndarray, limit: int = 128) -> float:
    """Mean absolute pairwise channel-response cosine at the regularized layer."""
    _, trace = model.forward(Tensor(images[:limit]), training=False)
    return mean_abs_pairwise_response_cosine(trace.responses.data)


def _write_run_csv(path, steps, seed_fp: str) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(RUN_CSV_HEADER + "\n")
        for s in steps:
            fh.write(
                f"{s.step},{s.epoch},{s.loss_total!r},{s.loss_id!r},"
                f"{s.loss_filter!r},{s.loss_response!r},{s.lr!r},{seed_fp}\n"
            )


def train(cfg: ExperimentConfig, out_dir, dataset: Dataset | None = None) -> RunRecord:
    """Run the full training algorithm and write all run artifacts."""
    start = time.perf_counter()
    if cfg.train.precision not in (32, 64):
        raise ConfigError(f"precision must be 32 or 64, got {cfg.train.precision}")
    set_default_dtype(np.float64 if cfg.train.precision == 64 else np.float32)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    # resolved config and seeds land on disk before any computation
    (out_dir / "config.resolved.cfg").write_text(cfg.snapshot_text(), encoding="ascii")
    seed_fp = cfg.seed_fingerprint()
    (out_dir / "seeds.txt").write_text(
        f"data={cfg.seed.data}\ninit={cfg.seed.init}\ndropout={cfg.seed.dropout}\n"
        f"fingerprint={seed_fp}\n",
        encoding="ascii",
    )
    if dataset is None:
        dataset = load_dataset(cfg)
    if dataset.num_ids != cfg.data.num_ids:
        raise ConfigError(
            f"dataset has {dataset.num_ids} identities, config expects {cfg.data.num_ids}"
        )
    init_rng = np.random.default_rng(cfg.seed.init)
    model, head = build_model(cfg, init_rng)
    image_strategy = build_image_strategy(cfg)
    drop_seed = cfg.lcd.seed if cfg.lcd.seed >= 0 else cfg.seed.dropout
    drop_rng = np.random.default_rng(drop_seed)
    shuffle_rng = np.random.default_rng([cfg.seed.data, 9])
    params = all_parameters(model, head)
    opt = MomentumSGD(params, momentum=cfg.train.momentum, clip_norm=cfg.train.clip_norm)

    train_x, train_y = dataset.train_split()
    steps = []
    step = 0
    alpha, beta = cfg.train.alpha, cfg.train.beta
    for epoch in range(cfg.train.epochs):
        lr = lr_at(cfg.train, epoch)
        order = shuffle_rng.permutation(len(train_x))
        for lo in range(0, len(order), cfg.train.batch_size):
            idx = order[lo : lo + cfg.train.batch_size]
            images = train_x[idx]
            if image_strategy is not None:
                images = image_strategy.apply_images(images, drop_rng)
            emb, trace = model.forward(Tensor(images), training=True, rng=drop_rng)
            l_id = margin_loss(emb, train_y[idx], head)
            bank = FilterBank(model.regularized_weights(), cfg.reg.column_mode)
            l_f = filter_orthogonal_loss(bank, cfg.reg.epsilon)
            l_r = response_orthogonal_loss(ResponseSet(trace.responses), cfg.reg.epsilon)
            # Each weighted decorrelation loss gets its own gradient trust
            # region, applied as a decoupled (momentum-free) step: at these
            # weights and layer sizes their raw gradients dwarf the task
            # gradient, and momentum amplification turns that into permanent
            # churn of the regularized layer.
            reg_trust = cfg.train.reg_clip_norm > 0.0
            task = l_id
            if alpha != 0.0 and not reg_trust:
                task = task + Tensor(np.asarray(alpha)) * l_f
            if beta != 0.0 and not reg_trust:
                task = task + Tensor(np.asarray(beta)) * l_r
            total_value = float(l_id.data) + alpha * float(l_f.data) + beta * float(l_r.data)
            if not np.isfinite(total_value):
                diag = {
                    "step": step,
                    "epoch": epoch,
                    "batch_indices": idx.tolist(),
                    "seeds": {"data": cfg.seed.data, "init": cfg.seed.init, "dropout": drop_seed},
                    "losses": {
                        "id": float(l_id.data),
                        "filter": float(l_f.data),
                        "response": float(l_r.data),
                    },
                }
                (out_dir / "diagnostic.json").write_text(json.dumps(diag, indent=2))
                raise NumericError(f"non-finite loss at step {step}; snapshot written")
            opt.zero_grad()
            reg_steps = {}
            if reg_trust and alpha != 0.0:
                # the filter penalty's graph hangs off the conv weight only
                (Tensor(np.asarray(alpha)) * l_f).backward()
                w = model.regularized_weights()
                _stash_clipped(reg_steps, {"_reg_conv": w}, cfg.train.reg_clip_norm)
                w.grad = None
            if reg_trust and beta != 0.0:
                (Tensor(np.asarray(beta)) * l_r).backward()
                _stash_clipped(reg_steps, params, cfg.train.reg_clip_norm)
                # clear the whole response graph (shared activations
                # included) so the task backward cannot re-propagate it
                for node in l_r.graph_nodes():
                    node.grad = None
            task.backward()
            opt.step(lr)
            # decoupled maintenance steps: bounded, not momentum-amplified
            for target, g in reg_steps.values():
                target.data -= lr * g
            steps.append(
                StepRow(
                    step=step,
                    epoch=epoch,
                    loss_total=total_value,
                    loss_id=float(l_id.data),
                    loss_filter=float(l_f.data),
                    loss_response=float(l_r.data),
                    lr=lr,
                )
            )
            step += 1

    _write_run_csv(out_dir / "run_record.csv", steps, seed_fp)
    tensors = {name: t.data for name, t in params.items()}
    tensors.update({name: arr for name, arr in model.named_buffers().items()})
    ckpt_path = out_dir / "checkpoint.bin"
    save_checkpoint(ckpt_path, tensors, cfg.fingerprint())

    metric_rows, metric_values = evaluate_model(model, dataset, cfg)
    write_metrics_csv(out_dir / "metrics.csv", metric_rows)

    sam_count = 0
    if model.insertion is not None and model.insertion.sam is not None:
        sam_count = sum(t.size for t in model.insertion.sam.parameters().values())
    test_x, _ = dataset.test_split()
    summary = {
        "config_fingerprint": cfg.fingerprint(),
        "seed_fingerprint": seed_fp,
        "seeds": {"data": cfg.seed.data, "init": cfg.seed.init, "dropout": drop_seed},
        "wall_clock_s": time.perf_counter() - start,
        "parameter_count": model.parameter_count() + head.class_weights.size,
        "sam_parameter_count": sam_count,
        "head_clamped_cosines": head.clamp_count,
        "final_losses": {
            "total": steps[-1].loss_total,
            "id": steps[-1].loss_id,
            "filter": steps[-1].loss_filter,
            "response": steps[-1].loss_response,
        },
        "metrics": metric_values,
        "response_cosine": measure_response_cosine(model, test_x),
        "checkpoint": str(ckpt_path),
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    record = RunRecord(
        steps=steps,
        metrics=metric_values,
        checkpoint_path=str(ckpt_path),
        run_dir=str(out_dir),
        wall_clock=summary["wall_clock_s"],
        seed_fingerprint=seed_fp,
        config_fingerprint=cfg.fingerprint(),
        parameter_count=summary["parameter_count"],
        sam_parameter_count=sam_count,
    )
    record.model = model
    record.head = head
    record.dataset = dataset
    return record


def train_plain_reference(cfg: ExperimentConfig, dataset: Dataset) -> list:
    """Independent minimal loop (forward, margin loss, backward, step) used
    to pin down the degenerate-config path of `train`. Returns loss_total
    per step."""
    set_default_dtype(np.float64 if cfg.train.precision == 64 else np.float32)
    init_rng = np.random.default_rng(cfg.seed.init)
    model, head = build_model(cfg, init_rng)
    shuffle_rng = np.random.default_rng([cfg.seed.data, 9])
    opt = MomentumSGD(
        all_parameters(model, head), momentum=cfg.train.momentum, clip_norm=cfg.train.clip_norm
    )
    train_x, train_y = dataset.train_split()
    losses = []
    for epoch in range(cfg.train.epochs):
        lr = lr_at(cfg.train, epoch)
        order = shuffle_rng.permutation(len(train_x))
        for lo in range(0, len(order), cfg.train.batch_size):
            idx = order[lo : lo + cfg.train.batch_size]
            emb, _ = model.forward(Tensor(train_x[idx]), training=True)
            loss = margin_loss(emb, train_y[idx], head)
            opt.zero_grad()
            loss.backward()
            opt.step(lr)
            losses.append(float(loss.data))
    return losses


def load_model(cfg: ExperimentConfig, ckpt_path):
    """Rebuild the model/head for `cfg` and load checkpoint values into it."""
    from .checkpoint import load_checkpoint
    from .errors import DataError

    tensors, fp = load_checkpoint(ckpt_path)
    if fp != cfg.fingerprint():
        log.warning(
            "checkpoint fingerprint %s differs from config fingerprint %s", fp, cfg.fingerprint()
        )
    model, head = build_model(cfg, np.random.default_rng(cfg.seed.init))
    params = all_parameters(model, head)
    for name, t in params.items():
        if name not in tensors:
            raise DataError(f"checkpoint is missing parameter {name!r}")
        if tuple(tensors[name].shape) != t.data.shape:
            raise DataError(
                f"checkpoint parameter {name!r} has shape {tensors[name].shape}, "
                f"model expects {t.data.shape}"
            )
        t.data = tensors[name].astype(t.data.dtype)
    for name in model.named_buffers():
        if name in tensors:
            model.set_buffer(name, tensors[name])
    return model, head


# -- experiments ---------------------------------------------------------------


def mse_compensation_experiment(
    models: dict,
    dataset: Dataset,
    policy: GammaPolicy,
    seed: int,
    max_samples: int = 256,
) -> dict:
    """Mean embedding MSE between clean and forced-drop eval forwards.

    The same per-sample drop sets are applied to every model (paired
    design), injected at the forced-drop stage.
    """
    test_x, _ = dataset.test_split()
    images = test_x[:max_samples]
    n = len(images)
    channels = {m.stage_channels(3) for m in models.values()}
    if len(channels) != 1:
        raise ContractError(f"models disagree on stage-3 width: {sorted(channels)}")
    c = channels.pop()
    policy.validate_for_channels(c)
    rng = np.random.default_rng([seed, 31])
    forced = sample_mask(n, c, 1, 1, policy, rng).channel_mask
    out = {}
    for name, model in models.items():
        emb0 = embed_images(model, images)
        chunks = []
        for lo in range(0, n, 128):
            emb, _ = model.forward(
                Tensor(images[lo : lo + 128]), training=False, forced_mask=forced[lo : lo + 128]
            )
            chunks.append(emb.data.copy())
        emb1 = np.concatenate(chunks)
        per_sample = np.mean((emb0 - emb1) ** 2, axis=1)
        out[name] = float(per_sample.mean())
    return out


ABLATION_VARIANTS = ("baseline", "cd", "cd_sr", "cd_sr_sam")


def ablation_variant(cfg: ExperimentConfig, variant: str) -> ExperimentConfig:
    if variant == "baseline":
        return cfg.with_values(
            **{"strategy.name": "none", "sam.enabled": False, "train.alpha": 0.0, "train.beta": 0.0}
        )
    if variant == "cd":
        return cfg.with_values(
            **{"strategy.name": "lcd", "sam.enabled": False, "train.alpha": 0.0, "train.beta": 0.0}
        )
    if variant == "cd_sr":
        return cfg.with_values(**{"strategy.name": "lcd", "sam.enabled": False})
    if variant == "cd_sr_sam":
        return cfg.with_values(**{"strategy.name": "lcd", "sam.enabled": True})
    raise ConfigError(f"unknown ablation variant {variant!r}")


def seeded(cfg: ExperimentConfig, rep: int) -> ExperimentConfig:
    """Matched seeds for repetition `rep`: shared data, shifted init/dropout."""
    return cfg.with_values(
        **{"seed.init": cfg.seed.init + 100 * rep, "seed.dropout": cfg.seed.dropout + 100 * rep}
    )


def ablation_suite(cfg: ExperimentConfig, out_root, seeds: int = 1, dataset: Dataset | None = None):
    """Train the four component configurations under matched seeds."""
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    if dataset is None:
        dataset = load_dataset(cfg)
    runs = {}
    run_rows = []
    for variant in ABLATION_VARIANTS:
        for rep in range(seeds):
            vcfg = seeded(ablation_variant(cfg, variant), rep)
            run_dir = out_root / f"{variant}_seed{rep}"
            try:
                record = train(vcfg, run_dir, dataset=dataset)
                runs[(variant, rep)] = record
                run_rows.append(
                    {
                        "variant": variant,
                        "rep": rep,
                        "occluded_rank1": record.metrics["rank1_occluded"],
                        "clean_rank1": record.metrics["rank1_clean"],
                        "config_fingerprint": record.config_fingerprint,
                        "status": "ok",
                    }
                )
            except Exception as exc:  # partial table with failure annotation
                log.error("ablation member %s rep %d failed: %s", variant, rep, exc)
                run_rows.append(
                    {
                        "variant": variant,
                        "rep": rep,
                        "occluded_rank1": float("nan"),
                        "clean_rank1": float("nan"),
                        "config_fingerprint": seeded(ablation_variant(cfg, variant), rep).fingerprint(),
                        "status": f"failed: {exc}",
                    }
                )
    table = []
    for variant in ABLATION_VARIANTS:
        rows = [r for r in run_rows if r["variant"] == variant and r["status"] == "ok"]
        occl = float(np.mean([r["occluded_rank1"] for r in rows])) if rows else float("nan")
        clean = float(np.mean([r["clean_rank1"] for r in rows])) if rows else float("nan")
        fprints = sorted({r["config_fingerprint"] for r in run_rows if r["variant"] == variant})
        table.append(
            {
                "variant": variant,
                "occluded_rank1": occl,
                "clean_rank1": clean,
                "seeds": len(rows),
                "config_fingerprint": "+".join(fprints),
            }
        )
    with open(out_root / "ablation.csv", "w", encoding="ascii") as fh:
        fh.write("variant,occluded_rank1,clean_rank1,seeds,config_fingerprint\n")
        for row in table:
            fh.write(
                f"{row['variant']},{row['occluded_rank1']!r},{row['clean_rank1']!r},"
                f"{row['seeds']},{row['config_fingerprint']}\n"
            )
    with open(out_root / "ablation_runs.csv", "w", encoding="ascii") as fh:
        fh.write("variant,rep,occluded_rank1,clean_rank1,config_fingerprint,status\n")
        for r in run_rows:
            fh.write(
                f"{r['variant']},{r['rep']},{r['occluded_rank1']!r},{r['clean_rank1']!r},"
                f"{r['config_fingerprint']},{r['status']}\n"
            )
    return table, runs


def place_sweep(cfg: ExperimentConfig, out_root, stages=(2, 3, 4), dataset: Dataset | None = None):
    """Train the full method with the insertion at each stage; emit the table."""
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    if dataset is None:
        dataset = load_dataset(cfg)
    rows = []
    for stage in stages:
        scfg = cfg.with_values(**{"lcd.stage": int(stage)})
        record = train(scfg, out_root / f"stage{stage}", dataset=dataset)
        rows.append(
            {
                "stage": int(stage),
                "occluded_rank1": record.metrics["rank1_occluded"],
                "clean_rank1": record.metrics["rank1_clean"],
                "config_fingerprint": record.config_fingerprint,
            }
        )
    with open(out_root / "place_sweep.csv", "w", encoding="ascii") as fh:
        fh.write("stage,occluded_rank1,clean_rank1,config_fingerprint\n")
        for row in rows:
            fh.write(
                f"{row['stage']},{row['occluded_rank1']!r},{row['clean_rank1']!r},"
                f"{row['config_fingerprint']}\n"
            )
    by_stage = {r["stage"]: r["occluded_rank1"] for r in rows}
    if 3 in by_stage and 4 in by_stage:
        trend = by_stage[3] >= by_stage[4]
        log.info("place sweep: stage3 >= stage4 on occluded rank-1: %s", trend)
        (out_root / "trend.txt").write_text(
            f"stage3_ge_stage4 = {str(trend).lower()}\n", encoding="ascii"
        )
    return rows
