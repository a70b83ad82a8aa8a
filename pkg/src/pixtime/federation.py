"""Deterministic in-process federated training rounds.

Shared modules (variable-embedding table, auxiliary encoder, target
decoder) travel between server and nodes; patch embedding, the abstract
token, the variable-wise input projection and the projection head never
leave their node. Aggregation reduces client deltas in ascending node-id
order with sample-count weights; variable-embedding rows are averaged
only over the clients that actually hold the category.
"""

import hashlib
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import backward, mse
from .data import NodeDataView, gather_batch
from .errors import AggregationError, ConfigError, DivergenceError, NumericError, PartitionError
from .model import ModelDims, NodeShapeConfig, PiXTime
from .optim import Adam

SHARED_ROOTS = frozenset({"ve_table", "aux_encoder", "target_decoder"})
LOCAL_ROOTS = frozenset(
    {"patch_linear", "abstract_token", "ve_linear", "projection", "pos_embed"}
)


def is_shared(name: str) -> bool:
    """Classify a parameter path; unknown roots fail closed."""
    root = name.split(".", 1)[0]
    if root in SHARED_ROOTS:
        return True
    if root in LOCAL_ROOTS:
        return False
    raise PartitionError(f"parameter {name!r} is neither shared nor local")


def partition(params: dict) -> tuple:
    """Split a named parameter map into (shared, local) sub-maps."""
    shared, local = {}, {}
    for name, p in params.items():
        (shared if is_shared(name) else local)[name] = p
    return shared, local


@dataclass
class ClientDelta:
    """One node's round contribution: shared-parameter changes only."""

    node_id: int
    deltas: dict
    weight: float
    ve_usage: np.ndarray


@dataclass
class RoundRecord:
    """Per-round log entry; durations are wall clock, the rest is replayable."""

    round_index: int
    node_losses: dict
    update_norms: dict
    duration_s: float
    node_shared_digests: dict = field(default_factory=dict)
    delta_names: tuple = ()


class FederatedNode:
    """A model plus its optimizer, data views and private batch ordering."""

    def __init__(
        self,
        dims: ModelDims,
        cfg: NodeShapeConfig,
        views: dict,
        seed: int,
        lr: float = 1e-4,
        batch_size: int = 32,
        use_ve: bool = True,
        use_pos_embed: bool = False,
        shuffle: bool = True,
        reset_opt_per_round: bool = False,
    ):
        self.cfg = cfg
        self.dims = dims
        self.model = PiXTime(
            dims, cfg, seed=seed, use_ve=use_ve, use_pos_embed=use_pos_embed
        )
        self.views = views
        self.optimizer = Adam(self.model.parameters(), lr=lr)
        self.batch_size = batch_size
        self.shuffle = shuffle
        self.reset_opt_per_round = reset_opt_per_round
        self.rng = np.random.default_rng([seed, cfg.node_id, 1])
        self.steps_taken = 0

    @property
    def node_id(self) -> int:
        return self.cfg.node_id

    @property
    def train_view(self) -> NodeDataView:
        return self.views["train"]

    def shared_values(self) -> dict:
        shared, _ = partition(self.model.params)
        return {name: p.data.copy() for name, p in shared.items()}

    def load_shared(self, values: dict) -> None:
        shared, _ = partition(self.model.params)
        if set(values) != set(shared):
            raise PartitionError(
                f"node {self.node_id}: shared name sets differ on broadcast"
            )
        for name, p in shared.items():
            p.data[...] = values[name]

    def ve_usage(self) -> np.ndarray:
        mask = np.zeros(self.dims.n_all, dtype=bool)
        mask[self.cfg.var_ids] = True
        mask[self.cfg.target_id] = True
        return mask

    def train_epochs(self, epochs: int) -> float:
        """Run local mini-batch Adam epochs; returns the mean sample loss."""
        starts = self.train_view.starts
        if epochs == 0 or len(starts) == 0:
            return float("nan")
        total_loss, total_samples = 0.0, 0
        for _ in range(epochs):
            order = self.rng.permutation(len(starts)) if self.shuffle else np.arange(len(starts))
            for lo in range(0, len(order), self.batch_size):
                batch = starts[order[lo : lo + self.batch_size]]
                x, Z, y = gather_batch(self.train_view, batch)
                try:
                    loss = mse(self.model.forward(x, Z), y)
                except NumericError as exc:
                    raise DivergenceError(self.node_id, self.steps_taken, str(exc)) from exc
                value = loss.item()
                if not np.isfinite(value):
                    raise DivergenceError(self.node_id, self.steps_taken)
                self.optimizer.zero_grad()
                backward(loss)
                self.optimizer.step()
                self.steps_taken += 1
                total_loss += value * len(batch)
                total_samples += len(batch)
        return total_loss / total_samples


def client_update(node: FederatedNode, global_shared: dict, epochs: int) -> tuple:
    """Broadcast-in, train locally, return (ClientDelta, mean train loss).

    Local parameters and the local Adam state persist on the node across
    rounds; only shared-parameter changes leave it.
    """
    node.load_shared(global_shared)
    if node.reset_opt_per_round:
        node.optimizer.reset_state()
    mean_loss = node.train_epochs(epochs)
    trained = node.shared_values()
    deltas = {name: trained[name] - global_shared[name] for name in global_shared}
    weight = float(epochs * len(node.train_view.starts))
    return (
        ClientDelta(
            node_id=node.node_id, deltas=deltas, weight=weight, ve_usage=node.ve_usage()
        ),
        mean_loss,
    )


def aggregate(deltas: list) -> dict:
    """Weighted mean of client deltas, reduced in ascending node-id order.

    Variable-embedding rows average only over clients whose usage mask
    covers the row; a row no client used gets a zero pseudo-gradient.
    """
    if not deltas:
        raise AggregationError("no client deltas to aggregate")
    ordered = sorted(deltas, key=lambda d: d.node_id)
    names = set(ordered[0].deltas)
    for d in ordered[1:]:
        if set(d.deltas) != names:
            raise AggregationError(
                f"delta name sets differ between nodes {ordered[0].node_id} and {d.node_id}"
            )
    for name in names:
        shapes = {d.deltas[name].shape for d in ordered}
        if len(shapes) != 1:
            raise AggregationError(f"shape mismatch for {name!r}: {sorted(shapes)}")

    total = sum(d.weight for d in ordered)
    if total <= 0:
        raise AggregationError("total client weight is zero; no client trained this round")

    n_all = ordered[0].ve_usage.shape[0]
    row_weight = np.zeros(n_all)
    for d in ordered:
        row_weight += np.where(d.ve_usage, d.weight, 0.0)

    pseudo = {}
    for name in sorted(names):
        acc = np.zeros_like(ordered[0].deltas[name])
        if name == "ve_table":
            for d in ordered:
                share = np.divide(
                    d.weight, row_weight, out=np.zeros(n_all), where=row_weight > 0
                )
                share = np.where(d.ve_usage, share, 0.0)
                acc += share[:, None] * d.deltas[name]
        else:
            for d in ordered:
                acc += (d.weight / total) * d.deltas[name]
        pseudo[name] = acc
    return pseudo


class ServerSGD:
    """FedAvg-style server: add the pseudo-gradient (lr 1.0 by default)."""

    def __init__(self, lr: float = 1.0):
        self.lr = lr

    def apply(self, global_shared: dict, pseudo: dict) -> dict:
        if self.lr == 1.0:
            return {name: global_shared[name] + pseudo[name] for name in global_shared}
        return {name: global_shared[name] + self.lr * pseudo[name] for name in global_shared}


class ServerAdam:
    """Adaptive server optimizer treating the negated pseudo-gradient as grad."""

    def __init__(self, lr: float = 1e-2, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m, self.v = {}, {}
        self.t = 0

    def apply(self, global_shared: dict, pseudo: dict) -> dict:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        out = {}
        for name, value in global_shared.items():
            g = -pseudo[name]
            m = self.m.get(name, np.zeros_like(value))
            v = self.v.get(name, np.zeros_like(value))
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * (g * g)
            self.m[name], self.v[name] = m, v
            out[name] = value - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        return out


def make_server_optimizer(kind: str, lr: float | None = None):
    if kind == "sgd":
        return ServerSGD(lr=1.0 if lr is None else lr)
    if kind == "adam":
        return ServerAdam(lr=1e-2 if lr is None else lr)
    raise ConfigError(f"unknown server optimizer {kind!r}")


def server_step(global_shared: dict, pseudo: dict, optimizer=None) -> dict:
    """Apply one server update; plain addition unless an optimizer is given."""
    opt = optimizer if optimizer is not None else ServerSGD()
    for name in global_shared:
        if pseudo[name].shape != global_shared[name].shape:
            raise AggregationError(
                f"pseudo-gradient shape mismatch for {name!r}: "
                f"{pseudo[name].shape} vs {global_shared[name].shape}"
            )
    return opt.apply(global_shared, pseudo)


def _shared_digest(node: FederatedNode) -> str:
    h = hashlib.sha256()
    for name in sorted(n for n in node.model.params if is_shared(n)):
        h.update(name.encode())
        h.update(np.ascontiguousarray(node.model.params[name].data).tobytes())
    return h.hexdigest()[:16]


def run_federation(
    nodes: list,
    global_shared: dict,
    rounds: int,
    epochs: int,
    server_optimizer=None,
) -> tuple:
    """Run synchronous full-participation rounds; returns (records, shared).

    Every round: broadcast the global shared parameters, let each node
    train locally, reduce the deltas, step the server, and re-broadcast so
    all nodes end the round with bit-identical shared parameters. Replay
    is deterministic for a fixed seed and node set.
    """
    opt = server_optimizer if server_optimizer is not None else ServerSGD()
    records = []
    for r in range(rounds):
        t0 = time.perf_counter()
        results = [client_update(node, global_shared, epochs) for node in nodes]
        deltas = [delta for delta, _ in results]
        losses = {node.node_id: loss for node, (_, loss) in zip(nodes, results)}
        pseudo = aggregate(deltas)
        new_shared = server_step(global_shared, pseudo, opt)
        norms = {
            name: float(np.linalg.norm(new_shared[name] - global_shared[name]))
            for name in sorted(global_shared)
        }
        global_shared = new_shared
        for node in nodes:
            node.load_shared(global_shared)
        records.append(
            RoundRecord(
                round_index=r,
                node_losses=losses,
                update_norms=norms,
                duration_s=time.perf_counter() - t0,
                node_shared_digests={n.node_id: _shared_digest(n) for n in nodes},
                delta_names=tuple(sorted(deltas[0].deltas)),
            )
        )
    return records, global_shared


def init_global_shared(dims: ModelDims, seed: int) -> dict:
    """Server-side initial shared parameter values.

    Shared shapes do not depend on any node's series geometry, so a
    minimal reference configuration is used to materialize them.
    """
    ref = NodeShapeConfig(
        node_id=-1, T=1, C=0, S=1, PL=1, var_ids=[], target_id=0, dt=1.0
    )
    model = PiXTime(dims, ref, seed=seed)
    shared, _ = partition(model.params)
    return {name: p.data.copy() for name, p in shared.items()}
