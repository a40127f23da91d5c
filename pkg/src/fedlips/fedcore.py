"""The federated round engine.

One communication round runs, in order: an optional per-client transient
masking event, local training on every client, server aggregation under the
configured policy, distribution of the new global model back to the clients,
and metric recording on the post-aggregation global model plus per-client
test evaluations.

Policies: ``fedavg`` aggregates every block including batch-norm state;
``fedbn`` and ``lips`` exclude BN blocks from both aggregation and
distribution so they stay client-local; ``separate`` never aggregates. With a
``fix_round`` set, rounds from that index on aggregate and distribute only
the first/last layers, and middle layers stop receiving local gradient
updates (unless the config variant keeps local updates alive).

Clients within a round may train on a thread pool; every client owns its
model and RNG streams exclusively during the round and aggregation reduces
in ascending client id, so results are identical for any worker count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import data as dt
from . import lips as lp
from . import metrics as mt
from . import model as md
from .config import ExperimentConfig, validate

# seed-tree stream tags: master -> (data, model-init, per-client-train, per-client-mask)
_STREAM_DATA_GEN = 0
_STREAM_PARTITION = 1
_STREAM_MODEL_INIT = 2
_STREAM_CLIENT_TRAIN = 3
_STREAM_CLIENT_MASK = 4
_STREAM_PARTICIPATION = 5


def stream_seed(master: int, *key: int) -> int:
    return int(np.random.SeedSequence([master, *key]).generate_state(1)[0])


@dataclass
class ClientState:
    id: int
    train_idx: np.ndarray
    test_idx: np.ndarray
    model: md.ModelParams
    init_snapshot: dict[str, np.ndarray]  # build-time weight blocks, for reinit
    train_rng: np.random.Generator
    mask_rng: np.random.Generator
    prev_round_pre: dict[str, np.ndarray] | None = None  # weights before last local phase
    delta_w: dict[str, np.ndarray] | None = None  # flat post-minus-pre of last local phase
    mask: lp.SparsityMask | None = None

    @property
    def data_size(self) -> int:
        return len(self.train_idx)


@dataclass
class ServerState:
    global_model: md.ModelParams
    round: int
    policy: str
    fix_round: int | None = None


def _bn_local(policy: str) -> bool:
    return policy in ("fedbn", "lips")


def _block_shared(layer: md.LayerParams, policy: str, fix_active: bool) -> bool:
    if policy == "separate":
        return False
    if layer.kind == "batchnorm" and _bn_local(policy):
        return False
    if fix_active and layer.role == md.ROLE_MIDDLE:
        return False
    return True


# ---------------------------------------------------------------------------
# local training
# ---------------------------------------------------------------------------

def local_train(client: ClientState, dataset: dt.Dataset, lr: float, epochs: int,
                batch_size: int, frozen: frozenset[str] = frozenset(),
                hold_mask: bool = False, reinit: str = "zero"):
    """Run E epochs of mini-batch SGD on one client.

    Snapshots the pre-training weights, performs deterministic per-client
    shuffling, and returns the new client state together with the per-layer
    mean of the per-step weight-gradient L2 norms. Masks are not enforced
    during steps unless hold_mask re-applies the client's current mask after
    every update.
    """
    n = len(client.train_idx)
    if n == 0:
        raise ValueError(f"client {client.id} has no training samples")
    model = client.model
    pre = {l.name: l.weights.copy() for l in model.layers}
    norm_sums: dict[str, float] = {l.name: 0.0 for l in model.layers}
    steps = 0
    for _ in range(epochs):
        perm = client.train_rng.permutation(n)
        for start in range(0, n, batch_size):
            sel = client.train_idx[perm[start:start + batch_size]]
            x = dataset.inputs[sel]
            y = dataset.labels[sel]
            _, grads, norms, bn_updates = md.forward_backward(model, x, y)
            for name, v in norms.items():
                norm_sums[name] += v
            steps += 1
            if frozen:
                grads = {name: ((np.zeros_like(g[0]), None if g[1] is None else np.zeros_like(g[1]))
                                if name in frozen else g)
                         for name, g in grads.items()}
            model = md.sgd_step(model, grads, lr)
            model = md.apply_bn_updates(model, bn_updates)
            if hold_mask and client.mask is not None:
                model = lp.apply_mask(model, client.mask, reinit, client.init_snapshot)
    delta = {l.name: model.layer(l.name).weights.ravel() - pre[l.name].ravel()
             for l in model.weight_layers()}
    mean_norms = {name: s / steps for name, s in norm_sums.items()}
    return replace(client, model=model, prev_round_pre=pre, delta_w=delta), mean_norms


# ---------------------------------------------------------------------------
# aggregation / distribution
# ---------------------------------------------------------------------------

def aggregate(base: md.ModelParams, clients: list[ClientState],
              data_sizes: list[int], policy: str, fix_active: bool = False) -> md.ModelParams:
    """Data-size weighted average of the shared blocks; excluded blocks keep
    the server's previous values untouched."""
    if not clients:
        raise ValueError("aggregate needs at least one client")
    if policy == "separate":
        raise ValueError("policy 'separate' never aggregates")
    order = np.argsort([c.id for c in clients])
    clients = [clients[i] for i in order]
    data_sizes = [data_sizes[i] for i in order]
    total = float(sum(data_sizes))
    weights = [s / total for s in data_sizes]

    for c in clients:
        if c.model.layer_names() != base.layer_names():
            raise ValueError(f"client {c.id} layers misaligned with global model")

    new_layers = []
    for li, base_layer in enumerate(base.layers):
        if not _block_shared(base_layer, policy, fix_active):
            new_layers.append(base_layer)
            continue
        blocks = [c.model.layers[li] for c in clients]
        for c, blk in zip(clients, blocks):
            if blk.weights.shape != base_layer.weights.shape:
                raise ValueError(
                    f"client {c.id} layer {blk.name} shape {blk.weights.shape} "
                    f"!= global {base_layer.weights.shape}")

        def wsum(pick):
            acc = weights[0] * pick(blocks[0])
            for wi, blk in zip(weights[1:], blocks[1:]):
                acc = acc + wi * pick(blk)
            return acc

        new_layers.append(replace(
            base_layer,
            weights=wsum(lambda b: b.weights),
            bias=None if base_layer.bias is None else wsum(lambda b: b.bias),
            running_mean=None if base_layer.running_mean is None else wsum(lambda b: b.running_mean),
            running_var=None if base_layer.running_var is None else wsum(lambda b: b.running_var),
        ))
    return base.with_layers(new_layers)


def distribute(global_model: md.ModelParams, clients: list[ClientState],
               policy: str, fix_active: bool = False) -> list[ClientState]:
    """Overwrite each client's shared blocks with the global values; local
    blocks (BN under fedbn/lips, middle layers past fix_round) are retained."""
    if policy == "separate":
        return clients
    out = []
    for client in clients:
        new_layers = []
        for li, layer in enumerate(client.model.layers):
            g = global_model.layers[li]
            if g.weights.shape != layer.weights.shape:
                raise ValueError(
                    f"distribute: client {client.id} layer {layer.name} shape mismatch")
            new_layers.append(g if _block_shared(layer, policy, fix_active) else layer)
        out.append(replace(client, model=client.model.with_layers(new_layers)))
    return out


# ---------------------------------------------------------------------------
# the round
# ---------------------------------------------------------------------------

def _mask_scope(model: md.ModelParams, cfg: ExperimentConfig) -> list[str]:
    return list(cfg.lips.scope) if cfg.lips.scope else model.middle_weight_layers()


def _mask_client(client: ClientState, cfg: ExperimentConfig, tau: float) -> ClientState:
    scope = _mask_scope(client.model, cfg)
    criterion = cfg.lips.criterion
    if criterion == "sensitivity":
        current = {n: md.layer_weight_vector(client.model, n) for n in scope}
        deltas = {n: client.delta_w[n] for n in scope}
        values = lp.sensitivity_scores(current, deltas)
    elif criterion == "magnitude":
        values = {n: md.layer_weight_vector(client.model, n) for n in scope}
    else:
        values = {}
    mask = lp.select_mask(values, tau, criterion, scope, client.mask_rng, client.model)
    model = lp.apply_mask(client.model, mask, cfg.lips.reinit, client.init_snapshot)
    return replace(client, model=model, mask=mask)


def run_round(server: ServerState, clients: list[ClientState],
              cfg: ExperimentConfig, dataset: dt.Dataset,
              executor: ThreadPoolExecutor | None = None):
    """Advance one communication round; returns (server', clients', accuracies,
    per-client grad-norm dicts)."""
    if cfg.rounds and server.round >= cfg.rounds:
        raise ValueError(f"round {server.round} already at the configured horizon")
    t = server.round + 1
    fix_active = server.fix_round is not None and t >= server.fix_round

    # uniform client sampling; the default fraction of 1.0 draws nothing
    part_ids = set(range(len(clients)))
    if cfg.participation_fraction < 1.0:
        count = max(1, round(cfg.participation_fraction * len(clients)))
        rng = np.random.default_rng(
            np.random.SeedSequence([cfg.seed, _STREAM_PARTICIPATION, t]))
        part_ids = set(int(i) for i in rng.choice(len(clients), size=count, replace=False))

    # (1) transient masking of participants; needs one completed local phase
    if cfg.method == "lips" and t % cfg.lips.k == 0 and t >= cfg.lips.k:
        tau = lp.decayed_tau(t, cfg.lips.tau0, cfg.rounds)
        clients = [
            _mask_client(c, cfg, tau)
            if c.id in part_ids and c.delta_w is not None else c
            for c in clients
        ]

    # (2) local training on the participating clients
    frozen = frozenset()
    if fix_active and not cfg.fix_local_updates:
        frozen = frozenset(
            l.name for l in server.global_model.layers if l.role == md.ROLE_MIDDLE)

    def train_one(client):
        return local_train(client, dataset, cfg.lr, cfg.local_epochs, cfg.batch_size,
                           frozen=frozen, hold_mask=cfg.lips.hold_mask,
                           reinit=cfg.lips.reinit)

    participants = [c for c in clients if c.id in part_ids]
    if executor is not None:
        results = list(executor.map(train_one, participants))
    else:
        results = [train_one(c) for c in participants]
    trained = {c.id: c for c, _ in results}
    clients = [trained.get(c.id, c) for c in clients]
    grad_norms = [r[1] for r in results]

    # (3) aggregation over participants, (4) distribution to everyone
    if cfg.method == "separate":
        new_global = server.global_model
    else:
        new_global = aggregate(server.global_model, list(trained.values()),
                               [c.data_size for c in trained.values()],
                               cfg.method, fix_active)
    clients = distribute(new_global, clients, cfg.method, fix_active)

    # (5) per-client evaluation on the distributed models
    def eval_one(client):
        return mt.evaluate_accuracy(client.model, dataset.inputs[client.test_idx],
                                    dataset.labels[client.test_idx])

    if executor is not None:
        accuracies = list(executor.map(eval_one, clients))
    else:
        accuracies = [eval_one(c) for c in clients]

    return ServerState(new_global, t, server.policy, server.fix_round), \
        clients, accuracies, grad_norms


# ---------------------------------------------------------------------------
# experiment assembly
# ---------------------------------------------------------------------------

def build_dataset(cfg: ExperimentConfig) -> dt.Dataset:
    ds = cfg.dataset
    if ds.kind == "synthetic":
        out = dt.gen_synthetic(ds.num_classes, ds.dim, ds.n_per_class,
                               ds.class_separation,
                               seed=stream_seed(cfg.seed, _STREAM_DATA_GEN),
                               noise=ds.noise)
        if ds.image_shape is not None:
            out = dt.Dataset(out.inputs.reshape(len(out), *ds.image_shape),
                             out.labels, out.num_classes)
        return out
    return dt.load_cifar10(ds.directory)


def setup_experiment(cfg: ExperimentConfig):
    """Validate, build dataset/partition/model/clients; returns
    (dataset, server, clients). All clients share the build-time init."""
    validate(cfg)
    dataset = build_dataset(cfg)
    if cfg.arch in ("vgg_mini", "resnet_mini") and dataset.inputs.ndim != 4:
        raise ValueError(f"arch {cfg.arch} needs image-shaped inputs; "
                         "set dataset.image_shape for synthetic data")
    partition = dt.dirichlet_partition(
        dataset, cfg.n_clients, cfg.alpha, cfg.samples_per_client,
        cfg.test_per_client, seed=stream_seed(cfg.seed, _STREAM_PARTITION))
    model0 = md.build_model(cfg.arch, dataset.inputs.shape[1:], dataset.num_classes,
                            seed=stream_seed(cfg.seed, _STREAM_MODEL_INIT))
    init_snapshot = {l.name: l.weights.copy() for l in model0.weight_layers()}
    clients = [
        ClientState(
            id=i, train_idx=train, test_idx=test, model=model0.clone(),
            init_snapshot=init_snapshot,
            train_rng=np.random.default_rng(
                np.random.SeedSequence([cfg.seed, _STREAM_CLIENT_TRAIN, i])),
            mask_rng=np.random.default_rng(
                np.random.SeedSequence([cfg.seed, _STREAM_CLIENT_MASK, i])),
        )
        for i, (train, test) in enumerate(partition.clients)
    ]
    server = ServerState(model0.clone(), 0, cfg.method, cfg.fix_round)
    return dataset, server, clients


def run_experiment(cfg: ExperimentConfig) -> mt.MetricsLog:
    """Run the full horizon and return the metrics log. Deterministic per
    master seed and independent of the worker count."""
    dataset, server, clients = setup_experiment(cfg)
    log = mt.MetricsLog()
    ref_snapshot = None
    executor = None
    try:
        if cfg.parallel_workers > 1:
            executor = ThreadPoolExecutor(max_workers=cfg.parallel_workers)
        for _ in range(cfg.rounds):
            server, clients, accuracies, grad_norms = run_round(
                server, clients, cfg, dataset, executor)
            if server.round == cfg.metrics_t0:
                ref_snapshot = md.weight_vectors(server.global_model)
            mt.record_round(log, server.round, accuracies, server.global_model,
                            ref_snapshot, grad_norms)
    finally:
        if executor is not None:
            executor.shutdown()
    return log
