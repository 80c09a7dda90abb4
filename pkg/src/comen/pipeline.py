"""Two-stage training orchestration, evaluation, and the ablation grid.

Stage 1 discovers latent domains (see discovery); stage 2 trains the
classifier with domain-specific normalization under frozen assignments plus
the prototype-graph and prototype-contrast losses. Rows of the ablation grid
without the normalization component divide the source pool into random
uniform groups for the prototype losses, and their encoder falls back to a
single-branch (plain batch-norm) stack.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .checkpoint import pack_state, read_arrays, unpack_state, write_arrays
from .config import TrainConfig
from .contrast import contrastive_loss_from_features
from .data import DatasetBundle, FoldData, fold_data
from .discovery import (
    DomainPredictor,
    Stage1Result,
    entropy_loss,
    predict_assignments,
    stage1_train,
)
from .errors import DivergenceError
from .model import Encoder
from .nn import SGD, cross_entropy, one_hot, rng_for
from .prototypes import PrototypeBank, ema_update, local_prototypes, loss_features
from .protograph import ProtoGraphHead, build_adjacency, protogr_loss
from .report import accuracy_from_confusion, confusion_matrix
from .stylenorm import pixel_style_vectors
from .tensor import Tensor, backward

ABLATION_GRID = (
    (False, False, False),
    (True, False, False),
    (False, True, False),
    (False, False, True),
    (False, True, True),
    (True, True, False),
    (True, False, True),
    (True, True, True),
)


def classification_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of class logits against integer labels."""
    return cross_entropy(logits, labels)


def total_loss(l_cls, l_protogr, l_protoccl, lam: float = 0.1, gamma: float = 0.1) -> Tensor:
    """Combined objective: l_cls + lam * l_protogr + gamma * l_protoccl."""
    l_cls = l_cls if isinstance(l_cls, Tensor) else Tensor(float(l_cls))
    l_protogr = l_protogr if isinstance(l_protogr, Tensor) else Tensor(float(l_protogr))
    l_protoccl = l_protoccl if isinstance(l_protoccl, Tensor) else Tensor(float(l_protoccl))
    for name, term in (("cls", l_cls), ("protogr", l_protogr), ("protoccl", l_protoccl)):
        if not np.isfinite(term.data).all():
            raise DivergenceError(f"non-finite {name} loss")
    return l_cls + lam * l_protogr + gamma * l_protoccl


@dataclass
class Stage2Result:
    encoder: Encoder
    predictor: DomainPredictor | None
    head: ProtoGraphHead | None
    bank: PrototypeBank | None
    use_sdnorm: bool
    best_epoch: int = 0
    curves: dict = field(default_factory=dict)
    step_cls_losses: list = field(default_factory=list)
    step_total_losses: list = field(default_factory=list)


def _frozen_rows(stage1: Stage1Result, positions: np.ndarray) -> np.ndarray:
    pos_to_row = {int(p): r for r, p in enumerate(stage1.source_idx)}
    return stage1.assignments[[pos_to_row[int(p)] for p in positions]]


def _bank_init_pass(encoder: Encoder, bank: PrototypeBank, x: np.ndarray,
                    y: np.ndarray, proto_p: np.ndarray, norm_p: np.ndarray) -> None:
    emb = encoder.embed_from_conv1(
        encoder.conv1_features(Tensor(x)), Tensor(norm_p), "infer", update_running=False
    )
    local = local_prototypes(Tensor(emb.data), y, Tensor(proto_p))
    ema_update(bank, local)


def infer_assignments(model: "Stage2Result", x: np.ndarray, cfg: TrainConfig) -> np.ndarray:
    """Soft assignments for unseen samples via the frozen domain predictor."""
    styles = pixel_style_vectors(x, cfg.eps)
    return predict_assignments(model.predictor, Tensor(styles)).data


def eval_logits(model: "Stage2Result", x: np.ndarray, cfg: TrainConfig) -> np.ndarray:
    """Inference-mode logits; soft assignments come from the frozen domain
    predictor when normalization branches are in play."""
    if model.use_sdnorm:
        p = Tensor(infer_assignments(model, x, cfg))
    else:
        p = Tensor(np.ones((x.shape[0], 1)))
    c1 = model.encoder.conv1_features(Tensor(x))
    return model.encoder.head_from_conv1(c1, p, "infer", update_running=False).data


def _split_accuracy(model: "Stage2Result", x, y, cfg, batch_size) -> float:
    correct = 0
    for start in range(0, x.shape[0], batch_size):
        logits = eval_logits(model, x[start:start + batch_size], cfg)
        correct += int((logits.argmax(axis=1) == y[start:start + batch_size]).sum())
    return correct / x.shape[0]


def train_stage2(fold: FoldData, cfg: TrainConfig, seed: int,
                 stage1: Stage1Result | None = None) -> Stage2Result:
    """Train the classifier under the configured component switches.

    With all switches off this is exactly a plain cross-entropy trainer over
    the pooled source data.
    """
    if cfg.sdnorm and stage1 is None:
        raise ValueError("sdnorm requires a stage-1 result (frozen assignments)")
    m_proto = cfg.resolve_domains(fold.domains)
    c_in = fold.train_x.shape[1]
    n_train = fold.train_x.shape[0]
    use_proto = cfg.protogr or cfg.protoccl

    if cfg.sdnorm:
        encoder = Encoder(c_in, fold.classes, m_proto, seed, cfg)
        if cfg.stage2_restart:
            encoder.materialize(fold.train_x.shape[2:])
        else:
            encoder.load_state(stage1.encoder.state_arrays())
        predictor = stage1.predictor
        norm_p_all = _frozen_rows(stage1, fold.train_idx)
        proto_p_all = norm_p_all
    else:
        encoder = Encoder(c_in, fold.classes, 1, seed, cfg)
        predictor = None
        norm_p_all = np.ones((n_train, 1))
        proto_p_all = None
        if use_proto:
            dom = rng_for(seed, "uniform-domains").integers(0, m_proto, size=n_train)
            proto_p_all = one_hot(dom, m_proto)

    bank = PrototypeBank(m_proto, fold.classes, cfg.embed_dim, cfg.rho) if use_proto else None
    head = None
    if use_proto:
        _bank_init_pass(encoder, bank, fold.train_x, fold.train_y, proto_p_all, norm_p_all)
    if cfg.protogr:
        head = ProtoGraphHead(cfg.embed_dim, fold.classes, seed, cfg.leaky_slope)

    params = encoder.parameters()
    if encoder.fc is None:
        encoder.materialize(fold.train_x.shape[2:])
        params = encoder.parameters()
    if head is not None:
        params = params + head.parameters()
    refine = cfg.sdnorm and cfg.stage2_refine_predictor
    train_styles = None
    if refine:
        params = params + predictor.parameters()
        train_styles = pixel_style_vectors(fold.train_x, cfg.eps)
    opt = SGD(params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)

    result = Stage2Result(encoder=encoder, predictor=predictor, head=head, bank=bank,
                          use_sdnorm=cfg.sdnorm,
                          curves={"train_total": [], "val_accuracy": []})
    best = (-1.0, 0, None)  # (val accuracy, epoch, state snapshot)

    for epoch in range(cfg.stage2_epochs):
        if epoch == cfg.lr_decay_epoch:
            opt.lr = cfg.lr * cfg.lr_decay_factor
        order = rng_for(seed, "stage2-shuffle", epoch).permutation(n_train)
        epoch_losses = []
        for start in range(0, n_train, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if idx.size < 2:
                continue
            x = Tensor(fold.train_x[idx])
            y = fold.train_y[idx]
            c1 = encoder.conv1_features(x)
            refine_p = None
            if refine:
                refine_p = predict_assignments(predictor, Tensor(train_styles[idx]))
                norm_p = Tensor(refine_p.data)
                proto_p = norm_p
            else:
                norm_p = Tensor(norm_p_all[idx])
                proto_p = Tensor(proto_p_all[idx]) if use_proto else None
            emb = encoder.embed_from_conv1(c1, norm_p, "train")
            logits = encoder.head(emb)
            l_cls = classification_loss(logits, y)

            l_pgr: Tensor | float = Tensor(0.0)
            l_pccl: Tensor | float = Tensor(0.0)
            local = None
            if use_proto:
                local = local_prototypes(emb, y, proto_p)
                feats, node_classes, _ = loss_features(bank, local)
                degenerate = feats is None or np.any((feats.data ** 2).sum(axis=1) < 1e-24)
                if not degenerate:
                    if cfg.protogr:
                        adj = build_adjacency(feats, cfg.delta)
                        l_pgr = protogr_loss(head, feats, adj, node_classes)
                    if cfg.protoccl:
                        l_pccl = contrastive_loss_from_features(
                            feats, node_classes, cfg.tau, cfg.contrast_normalize
                        )
            loss = total_loss(l_cls, l_pgr, l_pccl, cfg.lam, cfg.gamma)
            if refine:
                loss = loss + entropy_loss(refine_p)
            if not np.isfinite(loss.item()):
                raise DivergenceError(f"stage 2 loss non-finite at epoch {epoch}")
            backward(loss)
            opt.step()
            if local is not None:
                ema_update(bank, local)
            epoch_losses.append(loss.item())
            result.step_cls_losses.append(l_cls.item())
            result.step_total_losses.append(loss.item())

        result.curves["train_total"].append(float(np.mean(epoch_losses)))
        val_acc = _split_accuracy(result, fold.val_x, fold.val_y, cfg, cfg.batch_size)
        result.curves["val_accuracy"].append(val_acc)
        if val_acc > best[0]:
            snapshot = {"encoder": encoder.state_arrays()}
            if head is not None:
                snapshot["head"] = head.state_arrays()
            if bank is not None:
                snapshot["bank"] = bank.state_arrays()
            best = (val_acc, epoch, snapshot)

    if best[2] is not None:
        encoder.load_state(best[2]["encoder"])
        if head is not None:
            head.load_state(best[2]["head"])
        if bank is not None:
            bank.load_state(best[2]["bank"])
    result.best_epoch = best[1]
    return result


@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray


def evaluate(model: Stage2Result, fold: FoldData, cfg: TrainConfig) -> EvalResult:
    """Accuracy and confusion matrix on the held-out domain."""
    preds = []
    for start in range(0, fold.test_x.shape[0], cfg.batch_size):
        logits = eval_logits(model, fold.test_x[start:start + cfg.batch_size], cfg)
        preds.append(logits.argmax(axis=1))
    pred = np.concatenate(preds) if preds else np.array([], dtype=np.int64)
    conf = confusion_matrix(fold.test_y, pred, fold.classes)
    return EvalResult(accuracy=accuracy_from_confusion(conf), confusion=conf)


@dataclass
class AblationReport:
    rows: list  # dicts: switches, per-fold mean accuracy, overall mean
    per_seed: dict  # (sdnorm, protogr, protoccl) -> (fold -> [acc per seed])


def run_ablation(bundle: DatasetBundle, cfg: TrainConfig,
                 seeds: tuple[int, ...] | None = None) -> AblationReport:
    """Evaluate every combination of the three components on every fold.

    Stage-1 results are shared across rows that use normalization branches
    (discovery does not depend on the other switches).
    """
    seeds = tuple(seeds if seeds is not None else cfg.seeds)
    folds = list(range(bundle.domains))
    per_seed: dict = {sw: {f: [] for f in folds} for sw in ABLATION_GRID}
    for seed in seeds:
        for fold_id in folds:
            fold = fold_data(bundle, fold_id)
            stage1 = None
            for switches in ABLATION_GRID:
                row_cfg = cfg.with_switches(*switches)
                if row_cfg.sdnorm and stage1 is None:
                    stage1 = stage1_train(fold, row_cfg, seed)
                model = train_stage2(fold, row_cfg, seed,
                                     stage1 if row_cfg.sdnorm else None)
                per_seed[switches][fold_id].append(evaluate(model, fold, row_cfg).accuracy)
    rows = []
    for switches in ABLATION_GRID:
        row = {"sdnorm": switches[0], "protogr": switches[1], "protoccl": switches[2]}
        fold_means = []
        for f in folds:
            row[f] = float(np.mean(per_seed[switches][f]))
            fold_means.append(row[f])
        row["mean"] = float(np.mean(fold_means))
        rows.append(row)
    return AblationReport(rows=rows, per_seed=per_seed)


# -- checkpoint packing -------------------------------------------------------


def save_stage1_checkpoint(path, stage1: Stage1Result, fold: FoldData, cfg: TrainConfig) -> None:
    arrays: dict[str, np.ndarray] = {}
    pack_state("encoder", stage1.encoder.state_arrays(), arrays)
    pack_state("predictor", stage1.predictor.state_arrays(), arrays)
    arrays["meta"] = np.array([
        fold.held_out, fold.classes, stage1.encoder.domains,
        stage1.encoder.in_channels, cfg.embed_dim,
    ], dtype=np.float64)
    write_arrays(path, arrays)


def load_stage1_model(path, cfg: TrainConfig) -> tuple[Encoder, DomainPredictor, int]:
    arrays = read_arrays(path)
    held_out, classes, domains, in_channels, embed_dim = (int(v) for v in arrays["meta"])
    run_cfg = replace(cfg, embed_dim=embed_dim)
    encoder = Encoder(in_channels, classes, domains, 0, run_cfg)
    encoder.load_state(unpack_state("encoder", arrays))
    predictor = DomainPredictor(2 * in_channels, domains, 0,
                                hidden=run_cfg.predictor_hidden, slope=run_cfg.leaky_slope)
    predictor.load_state(unpack_state("predictor", arrays))
    return encoder, predictor, held_out


def save_stage2_checkpoint(path, model: Stage2Result, fold: FoldData, cfg: TrainConfig) -> None:
    arrays: dict[str, np.ndarray] = {}
    pack_state("encoder", model.encoder.state_arrays(), arrays)
    if model.predictor is not None:
        pack_state("predictor", model.predictor.state_arrays(), arrays)
    if model.head is not None:
        pack_state("head", model.head.state_arrays(), arrays)
    if model.bank is not None:
        pack_state("bank", model.bank.state_arrays(), arrays)
    arrays["meta"] = np.array([
        fold.held_out, fold.classes, model.encoder.domains,
        model.encoder.in_channels, cfg.embed_dim, float(model.use_sdnorm),
        model.best_epoch,
    ], dtype=np.float64)
    write_arrays(path, arrays)


def load_stage2_model(path, cfg: TrainConfig) -> tuple[Stage2Result, int]:
    arrays = read_arrays(path)
    meta = arrays["meta"]
    held_out, classes, domains, in_channels, embed_dim = (int(v) for v in meta[:5])
    use_sdnorm = bool(meta[5] > 0.5)
    run_cfg = replace(cfg, embed_dim=embed_dim)
    encoder = Encoder(in_channels, classes, domains, 0, run_cfg)
    encoder.load_state(unpack_state("encoder", arrays))
    predictor = None
    if any(k.startswith("predictor.") for k in arrays):
        predictor = DomainPredictor(2 * in_channels, domains, 0,
                                    hidden=run_cfg.predictor_hidden, slope=run_cfg.leaky_slope)
        predictor.load_state(unpack_state("predictor", arrays))
    head = None
    if any(k.startswith("head.") for k in arrays):
        head = ProtoGraphHead(embed_dim, classes, 0, run_cfg.leaky_slope)
        head.load_state(unpack_state("head", arrays))
    bank = None
    if any(k.startswith("bank.") for k in arrays):
        bank_arrays = unpack_state("bank", arrays)
        bank = PrototypeBank(bank_arrays["protos"].shape[0], classes,
                             bank_arrays["protos"].shape[2], cfg.rho)
        bank.load_state(bank_arrays)
    model = Stage2Result(encoder=encoder, predictor=predictor, head=head, bank=bank,
                         use_sdnorm=use_sdnorm, best_epoch=int(meta[6]))
    return model, held_out
