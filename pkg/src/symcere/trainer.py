"""Multi-task training: cross-modal alignment + intra-modal contrast +
pairwise ranking + L2 regularization, optimized with Adam.

The trainer only ever sees a TrainData view; it has no field through which a
test interaction could reach a loss.  All randomness flows from the config
seed through named substreams, so a run is reproducible bit-for-bit and a
resumed run continues exactly where the checkpoint left off (epoch streams
are derived from the epoch number, not from saved generator state).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import struct
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import encoder, losses
from .data import (
    DataError,
    InteractionSet,
    TrainData,
    build_adjacency,
    build_negative_mask,
    interaction_matrix,
)
from .encoder import GraphParams, NgcfLayerWeights, NgcfWeights
from .losses import LossWeights, NumericError, ProjectionHead

log = logging.getLogger(__name__)

CKPT_MAGIC = b"SYMT"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sI32sQQI")

VARIANTS = ("symcere", "infonce", "bpr_only")
BACKBONES = ("lightgcn", "ngcf")


@dataclass(frozen=True)
class TrainConfig:
    """Everything that defines a training run; hashed into checkpoints."""

    epochs: int = 50
    batch_size: int = 512
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    backbone: str = "lightgcn"
    embed_dim: int = 64
    num_layers: int = 3
    leaky_slope: float = 0.2
    loss_variant: str = "symcere"
    normalize: bool = True
    temperature: float = 0.2
    alpha: float = 0.5
    beta: float = 0.05
    lambda_reg: float = 1e-4
    edge_dropout: float = 0.1
    text_mask: float = 0.2
    eval_every: int = 0
    patience: int = 10

    def validate(self) -> None:
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.backbone not in BACKBONES:
            raise ValueError(f"backbone must be one of {BACKBONES}, got {self.backbone!r}")
        if self.loss_variant not in VARIANTS:
            raise ValueError(
                f"loss_variant must be one of {VARIANTS}, got {self.loss_variant!r}"
            )
        if self.embed_dim < 1 or self.num_layers < 0:
            raise ValueError("bad model size")
        self.weights().validate()
        if not 0.0 <= self.edge_dropout < 1.0:
            raise ValueError("edge_dropout must be in [0, 1)")
        if not 0.0 <= self.text_mask < 1.0:
            raise ValueError("text_mask must be in [0, 1)")

    def weights(self) -> LossWeights:
        return LossWeights(
            temperature=self.temperature,
            alpha=self.alpha,
            beta=self.beta,
            lambda_reg=self.lambda_reg,
        )

    def config_hash(self) -> bytes:
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).digest()


@dataclass
class AdamState:
    """First/second moment estimates per parameter, float64."""

    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]


def _glorot(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in, fan_out = shape[0], shape[-1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


def _check_unit_rows(*named: tuple[str, np.ndarray]) -> None:
    # normalized rows must stay within 1 +/- 1e-4 or downstream cosines lie
    for name, mat in named:
        drift = float(np.abs(np.linalg.norm(mat, axis=1) - 1.0).max())
        if not drift <= 1e-4:
            raise NumericError(f"{name} rows left the unit sphere (drift {drift:g})")


def sample_bpr_triples(
    train: TrainData, users: np.ndarray, items: np.ndarray, seed
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pair each observed (user, item) with a uniformly random unobserved item.

    `items[i]` is an item `users[i]` interacted with in training; the returned
    third array holds, per row, an item that user never interacted with,
    drawn by rejection so every unobserved item is equally likely.
    """
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    if users.shape != items.shape:
        raise ValueError(f"users/items length mismatch: {users.shape} vs {items.shape}")
    rng = np.random.default_rng(seed)
    ni = train.num_items
    neg = np.empty(users.shape[0], dtype=np.int64)
    for idx, u in enumerate(users.tolist()):
        seen = train.user_train_items[u]
        if int(items[idx]) not in seen:
            raise ValueError(f"item {int(items[idx])} is not a training item of user {u}")
        if len(seen) >= ni:
            raise DataError(f"user {u} has consumed every item; cannot sample a negative")
        while True:
            cand = int(rng.integers(0, ni))
            if cand not in seen:
                neg[idx] = cand
                break
    return users, items, neg


class Trainer:
    """Owns parameters, optimizer state, and the per-epoch loop.

    Accepts only the training view: passing a full split dataset raises, so
    evaluation data cannot flow in by accident.
    """

    def __init__(self, train: TrainData, text_embeddings: np.ndarray, config: TrainConfig):
        if isinstance(train, InteractionSet):
            raise TypeError(
                "Trainer takes the training view; call dataset.train_view() "
                "so test interactions stay outside"
            )
        if not isinstance(train, TrainData):
            raise TypeError(f"expected TrainData, got {type(train).__name__}")
        config.validate()
        text_embeddings = np.asarray(text_embeddings, dtype=np.float32)
        if text_embeddings.ndim != 2:
            raise DataError("text embeddings must be a 2-d matrix")
        if text_embeddings.shape[0] != train.n_train:
            raise DataError(
                f"{text_embeddings.shape[0]} embedding rows for "
                f"{train.n_train} training interactions"
            )

        self.train = train
        self.config = config
        self.text = text_embeddings
        self.text_dim = int(text_embeddings.shape[1])
        self.adj = build_adjacency(train)
        self.interactions = interaction_matrix(train)
        self.epoch = 0

        rng = np.random.default_rng([config.seed, 0])
        n = train.num_users + train.num_items
        d = config.embed_dim
        base = rng.normal(0.0, 0.01, size=(n, d)).astype(np.float32)
        message = None
        if config.backbone == "ngcf":
            layers = []
            for _ in range(config.num_layers):
                layers.append(
                    NgcfLayerWeights(
                        w_self=_glorot(rng, (d, d)),
                        w_inter=_glorot(rng, (d, d)),
                        bias=np.zeros(d, dtype=np.float32),
                    )
                )
            w_out = _glorot(rng, ((config.num_layers + 1) * d, d))
            message = NgcfWeights(layers=layers, w_out=w_out)
        self.graph_params = GraphParams(
            base_embeddings=base,
            num_layers=config.num_layers,
            leaky_slope=config.leaky_slope,
            message=message,
        )
        self.head = ProjectionHead(
            w=_glorot(rng, (self.text_dim, d)), b=np.zeros(d, dtype=np.float32)
        )
        self.adam = AdamState(
            step=0,
            m={k: np.zeros_like(v, dtype=np.float64) for k, v in self.named_params().items()},
            v={k: np.zeros_like(v, dtype=np.float64) for k, v in self.named_params().items()},
        )

    def named_params(self) -> dict[str, np.ndarray]:
        """Stable name -> live float32 array; Adam mutates these in place."""
        out = {
            "base_embeddings": self.graph_params.base_embeddings,
            "proj_w": self.head.w,
            "proj_b": self.head.b,
        }
        if self.graph_params.message is not None:
            for k, layer in enumerate(self.graph_params.message.layers):
                out[f"layer{k}_w_self"] = layer.w_self
                out[f"layer{k}_w_inter"] = layer.w_inter
                out[f"layer{k}_bias"] = layer.bias
            out["w_out"] = self.graph_params.message.w_out
        return out

    # -- forward helpers ---------------------------------------------------

    def graph_embeddings(self, adj=None) -> np.ndarray:
        """Post-propagation node table (float64), users then items."""
        return encoder.forward(
            self.graph_params, adj if adj is not None else self.adj, self.config.backbone
        )

    def _forward(self, adj):
        if self.config.backbone == "ngcf":
            return encoder.ngcf_forward(self.graph_params, adj, want_cache=True)
        return encoder.lightgcn_forward(self.graph_params, adj), None

    def _backward_backbone(self, adj, cache, grad_table, grads: dict[str, np.ndarray]):
        if self.config.backbone == "ngcf":
            g = encoder.ngcf_backward(self.graph_params, adj, cache, grad_table)
            grads["base_embeddings"] += g.d_base
            for k, (dw1, dw2, db) in enumerate(g.d_layers):
                grads[f"layer{k}_w_self"] += dw1
                grads[f"layer{k}_w_inter"] += dw2
                grads[f"layer{k}_bias"] += db
            grads["w_out"] += g.d_w_out
        else:
            grads["base_embeddings"] += encoder.lightgcn_backward(
                self.graph_params, adj, grad_table
            )

    # -- training ----------------------------------------------------------

    def train_epoch(self) -> dict:
        """Run one epoch over a seeded shuffle of the training rows.

        Returns the epoch-mean loss breakdown.  Raises NumericError as soon
        as any term or gradient goes non-finite.
        """
        cfg = self.config
        n = self.train.n_train
        rng = np.random.default_rng([cfg.seed, 1, self.epoch])
        order = rng.permutation(n)

        sums = {"cross": 0.0, "intra": 0.0, "ranking": 0.0, "reg": 0.0, "total": 0.0}
        num_batches = 0
        for start in range(0, n, cfg.batch_size):
            rows = order[start : start + cfg.batch_size]
            seeds = rng.integers(0, 2**63, size=3)
            stats = self._train_batch(rows, seeds)
            for k in sums:
                sums[k] += stats[k]
            num_batches += 1

        self.epoch += 1
        out = {k: v / max(num_batches, 1) for k, v in sums.items()}
        out["epoch"] = self.epoch
        out["num_batches"] = num_batches
        return out

    def _train_batch(self, rows: np.ndarray, seeds: np.ndarray) -> dict:
        cfg = self.config
        w = cfg.weights()
        train = self.train
        nu = train.num_users
        n_nodes = nu + train.num_items
        d = cfg.embed_dim
        b = rows.shape[0]
        contrastive = cfg.loss_variant in ("symcere", "infonce")

        table, cache = self._forward(self.adj)
        users, items = train.users[rows], train.items[rows]

        grads = {k: np.zeros(v.shape, dtype=np.float64) for k, v in self.named_params().items()}
        d_table = np.zeros((n_nodes, d), dtype=np.float64)

        cross = intra = 0.0
        d_table2 = None
        adj_drop = cache2 = None
        if contrastive:
            g_raw = encoder.interaction_repr(table, users, items, nu)
            adj_drop = losses.augment_edge_dropout(self.adj, cfg.edge_dropout, seeds[0])
            table2, cache2 = self._forward(adj_drop)
            g2_raw = encoder.interaction_repr(table2, users, items, nu)

            t_clean = self.text[rows].astype(np.float64)
            t_masked = losses.augment_text_mask(t_clean, cfg.text_mask, seeds[1])
            t_raw = losses.project_text(self.head, t_clean)
            t2_raw = losses.project_text(self.head, t_masked)

            if cfg.normalize:
                g_hat, g_norms = losses.l2_normalize(g_raw, return_norms=True)
                g2_hat, g2_norms = losses.l2_normalize(g2_raw, return_norms=True)
                t_hat, t_norms = losses.l2_normalize(t_raw, return_norms=True)
                t2_hat, t2_norms = losses.l2_normalize(t2_raw, return_norms=True)
                _check_unit_rows(
                    ("graph", g_hat),
                    ("graph_view", g2_hat),
                    ("text", t_hat),
                    ("text_view", t2_hat),
                )
            else:
                g_hat, g2_hat, t_hat, t2_hat = g_raw, g2_raw, t_raw, t2_raw

            if cfg.loss_variant == "symcere":
                mask = build_negative_mask(train, rows, self.interactions).mask
            else:
                mask = losses.full_offdiagonal_mask(b)
            cross, d_g_hat, d_t_hat = losses.symcere_cross_modal(
                g_hat, t_hat, mask, w.temperature
            )

            intra_g, d_g_hat_i, d_g2_hat = losses.infonce_intra(g_hat, g2_hat, w.temperature)
            intra_t, d_t_hat_i, d_t2_hat = losses.infonce_intra(t_hat, t2_hat, w.temperature)
            intra = intra_g + intra_t

            d_g_hat = d_g_hat + w.alpha * d_g_hat_i
            d_t_hat = d_t_hat + w.alpha * d_t_hat_i
            d_g2_hat = w.alpha * d_g2_hat
            d_t2_hat = w.alpha * d_t2_hat

            if cfg.normalize:
                d_g = losses.l2_normalize_backward(g_hat, g_norms, d_g_hat)
                d_g2 = losses.l2_normalize_backward(g2_hat, g2_norms, d_g2_hat)
                d_t = losses.l2_normalize_backward(t_hat, t_norms, d_t_hat)
                d_t2 = losses.l2_normalize_backward(t2_hat, t2_norms, d_t2_hat)
            else:
                d_g, d_g2, d_t, d_t2 = d_g_hat, d_g2_hat, d_t_hat, d_t2_hat

            d_table += encoder.interaction_repr_backward(d_g, users, items, nu, n_nodes)
            d_table2 = encoder.interaction_repr_backward(d_g2, users, items, nu, n_nodes)

            dw_t, db_t = losses.project_text_backward(self.head, t_clean, d_t)
            dw_t2, db_t2 = losses.project_text_backward(self.head, t_masked, d_t2)
            grads["proj_w"] += dw_t + dw_t2
            grads["proj_b"] += db_t + db_t2

        # ranking on the same representations the recommender scores with
        _, _, neg = sample_bpr_triples(train, users, items, seeds[2])
        if cfg.normalize:
            nodes_hat, node_norms = losses.l2_normalize(table, return_norms=True)
            _check_unit_rows(("node", nodes_hat))
        else:
            nodes_hat, node_norms = table, None
        ranking, d_nodes_hat = losses.bpr_loss(nodes_hat, users, items, neg, nu)
        if cfg.normalize:
            d_table += w.beta * losses.l2_normalize_backward(
                nodes_hat, node_norms, d_nodes_hat
            )
        else:
            d_table += w.beta * d_nodes_hat

        reg_sq = sum(
            float(np.sum(p.astype(np.float64) ** 2)) for p in self.named_params().values()
        )
        total = losses.total_loss(cross, intra, ranking, reg_sq, w)

        self._backward_backbone(self.adj, cache, d_table, grads)
        if d_table2 is not None:
            self._backward_backbone(adj_drop, cache2, d_table2, grads)
        for name, param in self.named_params().items():
            grads[name] += 2.0 * w.lambda_reg * param.astype(np.float64)

        self._adam_step(grads)
        return {
            "cross": cross,
            "intra": intra,
            "ranking": ranking,
            "reg": reg_sq,
            "total": total,
        }

    def _adam_step(self, grads: dict[str, np.ndarray]) -> None:
        cfg = self.config
        st = self.adam
        st.step += 1
        b1, b2 = cfg.adam_beta1, cfg.adam_beta2
        bias1 = 1.0 - b1**st.step
        bias2 = 1.0 - b2**st.step
        for name in sorted(grads):
            g = grads[name]
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient for {name}")
            st.m[name] = b1 * st.m[name] + (1 - b1) * g
            st.v[name] = b2 * st.v[name] + (1 - b2) * g * g
            m_hat = st.m[name] / bias1
            v_hat = st.v[name] / bias2
            param = self.named_params()[name]
            new = param.astype(np.float64) - cfg.learning_rate * m_hat / (
                np.sqrt(v_hat) + cfg.adam_eps
            )
            param[...] = new.astype(param.dtype)

    # -- checkpointing -------------------------------------------------------

    def save_checkpoint(self, path: str | Path) -> None:
        save_checkpoint(path, self)

    def restore(self, path: str | Path, allow_config_mismatch: bool = False) -> None:
        """Load parameters, optimizer state, and epoch counter.

        The stored config hash must match this trainer's config unless
        explicitly overridden (which only warns).
        """
        header, blocks = read_checkpoint(path)
        if header["config_hash"] != self.config.config_hash():
            if not allow_config_mismatch:
                raise DataError(
                    f"{path}: checkpoint was written under a different config; "
                    "pass allow_config_mismatch to load anyway"
                )
            log.warning("%s: loading checkpoint despite config mismatch", path)
        params = self.named_params()
        want = set(params)
        have = {k[len("param:") :] for k in blocks if k.startswith("param:")}
        if want != have:
            raise DataError(
                f"{path}: parameter sets differ (missing {sorted(want - have)}, "
                f"extra {sorted(have - want)})"
            )
        for name, param in params.items():
            stored = blocks[f"param:{name}"]
            if stored.shape != param.shape:
                raise DataError(
                    f"{path}: {name} has shape {stored.shape}, expected {param.shape}"
                )
            param[...] = stored.astype(param.dtype)
            self.adam.m[name] = blocks[f"adam_m:{name}"].astype(np.float64)
            self.adam.v[name] = blocks[f"adam_v:{name}"].astype(np.float64)
        self.epoch = header["epoch"]
        self.adam.step = header["step"]


_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def save_checkpoint(path: str | Path, trainer: Trainer) -> None:
    """Binary checkpoint: header with config hash and counters, then one
    named block per parameter and per Adam moment.  Written to a temp file
    and renamed so a crash cannot leave a half-written checkpoint."""
    path = Path(path)
    blocks: list[tuple[str, np.ndarray]] = []
    for name, param in trainer.named_params().items():
        blocks.append((f"param:{name}", np.ascontiguousarray(param)))
        blocks.append((f"adam_m:{name}", np.ascontiguousarray(trainer.adam.m[name])))
        blocks.append((f"adam_v:{name}", np.ascontiguousarray(trainer.adam.v[name])))

    payload = bytearray()
    payload += _CKPT_HEADER.pack(
        CKPT_MAGIC,
        CKPT_VERSION,
        trainer.config.config_hash(),
        trainer.epoch,
        trainer.adam.step,
        len(blocks),
    )
    for name, arr in blocks:
        code = _DTYPE_CODES.get(arr.dtype)
        if code is None:
            raise ValueError(f"unsupported dtype {arr.dtype} for block {name}")
        raw = name.encode()
        payload += struct.pack("<H", len(raw)) + raw
        payload += struct.pack("<BB", code, arr.ndim)
        payload += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        payload += arr.tobytes(order="C")

    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse a checkpoint into (header dict, name -> array)."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < _CKPT_HEADER.size:
        raise DataError(f"{path}: truncated header")
    magic, version, cfg_hash, epoch, step, nblocks = _CKPT_HEADER.unpack_from(blob)
    if magic != CKPT_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != CKPT_VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    off = _CKPT_HEADER.size
    blocks: dict[str, np.ndarray] = {}
    for _ in range(nblocks):
        try:
            (name_len,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off : off + name_len].decode()
            off += name_len
            code, ndim = struct.unpack_from("<BB", blob, off)
            off += 2
            shape = struct.unpack_from(f"<{ndim}Q", blob, off)
            off += 8 * ndim
            dtype = _DTYPES[code]
            count = int(np.prod(shape)) if ndim else 1
            nbytes = count * dtype.itemsize
            if off + nbytes > len(blob):
                raise DataError(f"{path}: block {name} runs past end of file")
            arr = np.frombuffer(blob, dtype=dtype, count=count, offset=off).reshape(shape)
            off += nbytes
        except (struct.error, KeyError, UnicodeDecodeError) as exc:
            raise DataError(f"{path}: corrupt checkpoint block: {exc}") from exc
        blocks[name] = arr.copy()
    if off != len(blob):
        raise DataError(f"{path}: {len(blob) - off} trailing bytes")
    header = {"config_hash": cfg_hash, "epoch": epoch, "step": step}
    return header, blocks


def run_training(
    dataset: InteractionSet,
    text_embeddings: np.ndarray,
    config: TrainConfig,
    out_dir: str | Path | None = None,
    eval_topk: int = 10,
    epoch_callback=None,
) -> tuple[Trainer, list[dict]]:
    """Drive training with optional periodic held-out evaluation.

    The trainer itself only receives the training view; this driver owns the
    split dataset and runs evaluation every `eval_every` epochs, stopping
    early once NDCG has not improved for `patience` evaluations.  Appends one
    JSON line per epoch to train_log.jsonl when out_dir is given.

    `epoch_callback(trainer, stats)` runs after each epoch; any mapping it
    returns is merged into that epoch's log record.
    """
    from .evaluator import evaluate_all  # local import to avoid a cycle

    trainer = Trainer(dataset.train_view(), text_embeddings, config)
    log_path = Path(out_dir) / "train_log.jsonl" if out_dir is not None else None
    if log_path is not None:
        log_path.parent.mkdir(parents=True, exist_ok=True)
        log_path.write_text("")

    history: list[dict] = []
    best = -np.inf
    stale = 0
    for _ in range(config.epochs):
        t0 = time.perf_counter()
        stats = trainer.train_epoch()
        stats["wall_time_s"] = round(time.perf_counter() - t0, 3)

        if config.eval_every and trainer.epoch % config.eval_every == 0:
            table = trainer.graph_embeddings()
            report = evaluate_all(
                table, dataset, k_values=[eval_topk], normalize=config.normalize
            )
            stats["ndcg"] = report.ndcg[eval_topk]
            stats["hr"] = report.hr[eval_topk]
            if report.ndcg[eval_topk] > best:
                best = report.ndcg[eval_topk]
                stale = 0
            else:
                stale += 1

        if epoch_callback is not None:
            extra = epoch_callback(trainer, stats)
            if extra:
                stats.update(extra)

        history.append(stats)
        if log_path is not None:
            with open(log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(stats, sort_keys=True) + "\n")
        if config.eval_every and config.patience and stale >= config.patience:
            log.info("early stop at epoch %d (no improvement)", trainer.epoch)
            break
    return trainer, history
