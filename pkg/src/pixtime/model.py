"""The PiXTime forecasting model.

A target series is split into fixed-physical-span patches and embedded
into D-dimensional tokens behind a learnable abstract token; auxiliary
series become variable-wise tokens (one per series) with a category
embedding added from a global table. A transformer encoder extracts
variable-wise representations, a decoder refines the patch tokens with
self-attention and injects auxiliary information into the abstract token
through cross-attention, and a node-local head projects the patch tokens
to the forecast horizon.

Patch embedding, the abstract token, the variable-wise input projection
and the projection head are node-local (their shapes depend on the node's
look-back/horizon lengths); the variable-embedding table, encoder and
decoder are shared across the federation.

Cross-attention writes into the abstract token only; that content reaches
the patch tokens through the next layer's self-attention, so auxiliary
information influences the forecast when the decoder has at least two
layers (the default harness configuration uses L=2).
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import (
    AttentionWeights,
    FeedForwardWeights,
    LayerNormWeights,
    Parameter,
    Tensor,
    as_tensor,
)
from .errors import CategoryError, ConfigError, ShapeError

LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelDims:
    """Network-wide dimensions; identical on every node of a federation."""

    D: int
    L: int
    H: int
    d_ff: int
    n_all: int

    def __post_init__(self):
        if self.D % self.H != 0:
            raise ConfigError(f"model dim {self.D} not divisible by {self.H} heads")
        if self.L < 1:
            raise ConfigError(f"layer count must be >= 1, got {self.L}")
        if self.n_all < 1:
            raise ConfigError(f"need at least one variable category, got {self.n_all}")
        if self.d_ff < 1:
            raise ConfigError(f"feed-forward width must be >= 1, got {self.d_ff}")


@dataclass
class NodeShapeConfig:
    """Per-node series geometry: look-back, horizon, patching, variables."""

    node_id: int
    T: int
    C: int
    S: int
    PL: int
    var_ids: list
    target_id: int
    dt: float = 1.0

    def __post_init__(self):
        if self.PL < 1 or self.T < 1 or self.S < 1:
            raise ConfigError(
                f"node {self.node_id}: T={self.T}, S={self.S}, PL={self.PL} must be positive"
            )
        if self.T % self.PL != 0:
            raise ConfigError(
                f"node {self.node_id}: look-back {self.T} is not a multiple of patch length {self.PL}"
            )
        self.var_ids = [int(v) for v in self.var_ids]
        if len(set(self.var_ids)) != len(self.var_ids):
            raise ConfigError(f"node {self.node_id}: duplicate auxiliary ids {self.var_ids}")
        if len(self.var_ids) != self.C:
            raise ConfigError(
                f"node {self.node_id}: C={self.C} but {len(self.var_ids)} auxiliary ids given"
            )

    @property
    def M(self) -> int:
        return self.T // self.PL


@dataclass
class ForecastSample:
    """One training/evaluation instance at a node's granularity."""

    x: np.ndarray
    Z: np.ndarray
    y: np.ndarray
    var_ids: list = field(default_factory=list)


def patch_split(x, PL: int) -> Tensor:
    """Split the last axis into non-overlapping patches of length PL.

    (..., T) -> (..., T // PL, PL); concatenating the patches back along
    time reconstructs the input exactly. No learnable parameters.
    """
    x = as_tensor(x)
    T = x.shape[-1]
    if PL < 1 or T % PL != 0:
        raise ShapeError(f"cannot split series of length {T} into patches of length {PL}")
    return ad.reshape(x, x.shape[:-1] + (T // PL, PL))


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class PiXTime:
    """One node's model instance: parameters plus the forward operations."""

    def __init__(
        self,
        dims: ModelDims,
        node: NodeShapeConfig,
        seed: int = 0,
        use_ve: bool = True,
        use_pos_embed: bool = False,
    ):
        for v in node.var_ids + [node.target_id]:
            if not 0 <= v < dims.n_all:
                raise CategoryError(
                    f"variable category {v} outside table of size {dims.n_all}"
                )
        self.dims = dims
        self.node = node
        self.use_ve = use_ve
        self.use_pos_embed = use_pos_embed
        self.params: dict[str, Parameter] = {}
        self._build(np.random.default_rng(seed))

    # -- construction -----------------------------------------------------

    def _param(self, name: str, value: np.ndarray) -> Parameter:
        p = Parameter(name, value)
        self.params[name] = p
        return p

    def _attention(self, prefix: str, rng) -> AttentionWeights:
        D = self.dims.D
        kw = {}
        for key in ("q", "k", "v", "o"):
            kw[f"w_{key}"] = self._param(f"{prefix}.w_{key}", _xavier(rng, D, D))
            if key != "k":  # key bias is a softmax no-op, see AttentionWeights
                kw[f"b_{key}"] = self._param(f"{prefix}.b_{key}", np.zeros(D))
        return AttentionWeights(**kw)

    def _ffn(self, prefix: str, rng) -> FeedForwardWeights:
        D, d_ff = self.dims.D, self.dims.d_ff
        return FeedForwardWeights(
            w1=self._param(f"{prefix}.w1", _xavier(rng, D, d_ff)),
            b1=self._param(f"{prefix}.b1", np.zeros(d_ff)),
            w2=self._param(f"{prefix}.w2", _xavier(rng, d_ff, D)),
            b2=self._param(f"{prefix}.b2", np.zeros(D)),
        )

    def _layer_norm(self, prefix: str) -> LayerNormWeights:
        D = self.dims.D
        return LayerNormWeights(
            gain=self._param(f"{prefix}.gain", np.ones(D)),
            bias=self._param(f"{prefix}.bias", np.zeros(D)),
        )

    def _build(self, rng: np.random.Generator) -> None:
        dims, node = self.dims, self.node
        D = dims.D

        self.patch_w = self._param("patch_linear.weight", _xavier(rng, node.PL, D))
        self.patch_b = self._param("patch_linear.bias", np.zeros(D))
        self.abstract_token = self._param(
            "abstract_token", rng.normal(0.0, 0.02, size=D)
        )
        self.ve_w = self._param("ve_linear.weight", _xavier(rng, node.T, D))
        self.ve_b = self._param("ve_linear.bias", np.zeros(D))
        # zero init keeps the with-table and without-table models identical
        # at step 0, so the ablation isolates what training adds
        self.ve_table = self._param("ve_table", np.zeros((dims.n_all, D)))

        self.encoder_layers = []
        for layer in range(dims.L):
            prefix = f"aux_encoder.layer{layer}"
            self.encoder_layers.append(
                {
                    "self_att": self._attention(f"{prefix}.self_att", rng),
                    "ln1": self._layer_norm(f"{prefix}.ln1"),
                    "ffn": self._ffn(f"{prefix}.ffn", rng),
                    "ln2": self._layer_norm(f"{prefix}.ln2"),
                }
            )

        self.decoder_layers = []
        for layer in range(dims.L):
            prefix = f"target_decoder.layer{layer}"
            self.decoder_layers.append(
                {
                    "self_att": self._attention(f"{prefix}.self_att", rng),
                    "ln1": self._layer_norm(f"{prefix}.ln1"),
                    "cross_att": self._attention(f"{prefix}.cross_att", rng),
                    "ln2": self._layer_norm(f"{prefix}.ln2"),
                    "ffn": self._ffn(f"{prefix}.ffn", rng),
                    "ln3": self._layer_norm(f"{prefix}.ln3"),
                }
            )

        self.proj_w = self._param(
            "projection.weight", _xavier(rng, node.M * D, node.S)
        )
        self.proj_b = self._param("projection.bias", np.zeros(node.S))
        if self.use_pos_embed:
            self.pos_embed = self._param(
                "pos_embed", rng.normal(0.0, 0.02, size=(node.M, D))
            )

    def parameters(self) -> dict[str, Parameter]:
        return self.params

    # -- forward operations ------------------------------------------------

    def patch_embed(self, x) -> Tensor:
        """(..., T) target series -> (..., M + 1, D) tokens.

        Row 0 is the abstract token verbatim; rows 1..M are the shared
        patch projection applied to each patch.
        """
        x = as_tensor(x)
        if x.shape[-1] != self.node.T:
            raise ShapeError(
                f"expected look-back {self.node.T}, got series of length {x.shape[-1]}"
            )
        patches = patch_split(x, self.node.PL)
        tokens = ad.linear(patches, self.patch_w, self.patch_b)
        if self.use_pos_embed:
            tokens = ad.add(tokens, self.pos_embed)
        head = ad.reshape(self.abstract_token, (1, self.dims.D))
        head = ad.broadcast_to(head, tokens.shape[:-2] + (1, self.dims.D))
        return ad.concat([head, tokens], axis=-2)

    def variable_embed(self, Z, var_ids=None) -> Tensor:
        """(..., T, C) auxiliary matrix -> (..., C, D) variable tokens.

        Token c is the series-wise projection of column c plus the
        category embedding looked up for var_ids[c].
        """
        Z = as_tensor(Z)
        ids = self.node.var_ids if var_ids is None else list(var_ids)
        if Z.shape[-1] != len(ids):
            raise ShapeError(
                f"auxiliary matrix has {Z.shape[-1]} columns but {len(ids)} ids given"
            )
        if Z.shape[-2] != self.node.T:
            raise ShapeError(
                f"expected look-back {self.node.T}, got auxiliary window {Z.shape[-2]}"
            )
        for v in ids:
            if not 0 <= v < self.dims.n_all:
                raise CategoryError(
                    f"variable category {v} outside table of size {self.dims.n_all}"
                )
        tokens = ad.linear(ad.swapaxes(Z, -1, -2), self.ve_w, self.ve_b)
        if self.use_ve:
            tokens = ad.add(tokens, ad.gather_rows(self.ve_table, ids))
        return tokens

    def aux_encoder(self, v_tokens: Tensor) -> Tensor:
        """L post-norm residual layers of self-attention + FFN over variables."""
        x = v_tokens
        H = self.dims.H
        for lp in self.encoder_layers:
            att = ad.multi_head_attention(x, x, x, lp["self_att"], H)
            x = ad.layer_norm(ad.add(x, att), lp["ln1"].gain, lp["ln1"].bias, LN_EPS)
            f = ad.ffn(x, lp["ffn"])
            x = ad.layer_norm(ad.add(x, f), lp["ln2"].gain, lp["ln2"].bias, LN_EPS)
        return x

    def decoder_layer(self, tokens: Tensor, v_aux: Tensor, layer: int) -> Tensor:
        """One decoder layer on (..., M + 1, D) patch tokens.

        Self-attention runs over all M + 1 tokens; cross-attention uses
        only the abstract token (row 0) as the query against the encoded
        auxiliary tokens; the FFN then mixes the cross-attended abstract
        token back into every row.
        """
        lp = self.decoder_layers[layer]
        H = self.dims.H
        n_tokens = tokens.shape[-2]

        att = ad.multi_head_attention(tokens, tokens, tokens, lp["self_att"], H)
        t1 = ad.layer_norm(ad.add(tokens, att), lp["ln1"].gain, lp["ln1"].bias, LN_EPS)

        head = ad.slice_axis(t1, -2, 0, 1)
        cross = ad.multi_head_attention(head, v_aux, v_aux, lp["cross_att"], H)
        head = ad.layer_norm(ad.add(head, cross), lp["ln2"].gain, lp["ln2"].bias, LN_EPS)

        t2 = ad.concat([head, ad.slice_axis(t1, -2, 1, n_tokens)], axis=-2)
        f = ad.ffn(t2, lp["ffn"])
        return ad.layer_norm(ad.add(t2, f), lp["ln3"].gain, lp["ln3"].bias, LN_EPS)

    def projection(self, tokens: Tensor) -> Tensor:
        """Flatten the M patch tokens (abstract token dropped) to length S."""
        M, D, S = self.node.M, self.dims.D, self.node.S
        patches = ad.slice_axis(tokens, -2, 1, tokens.shape[-2])
        lead = patches.shape[:-2]
        flat = ad.reshape(patches, lead + (M * D,))
        if flat.ndim == 1:
            out = ad.linear(ad.reshape(flat, (1, M * D)), self.proj_w, self.proj_b)
            return ad.reshape(out, (S,))
        return ad.linear(flat, self.proj_w, self.proj_b)

    def forward(self, x, Z, var_ids=None) -> Tensor:
        """Full forecast pass: (..., T) target + (..., T, C) auxiliaries -> (..., S)."""
        v_aux = self.variable_embed(Z, var_ids)
        v_enc = self.aux_encoder(v_aux)
        tokens = self.patch_embed(x)
        for layer in range(self.dims.L):
            tokens = self.decoder_layer(tokens, v_enc, layer)
        return self.projection(tokens)

    def m2m_forward(self, all_series, var_ids=None) -> Tensor:
        """Joint forecast of every variable: (..., T, n_var) -> (..., n_var, S).

        All variables form the auxiliary set (one encoder pass); each
        variable is also patch-embedded as a target, and the decoder
        processes the resulting batch in one pass with every abstract
        token cross-attending to the same encoded auxiliaries.
        """
        series = as_tensor(all_series)
        ids = list(var_ids) if var_ids is not None else [self.node.target_id] + self.node.var_ids
        n_var = len(ids)
        if n_var < 1:
            raise ConfigError("m2m requires at least one variable")
        if series.shape[-1] != n_var:
            raise ShapeError(
                f"series matrix has {series.shape[-1]} columns but {n_var} ids given"
            )
        v_aux = self.variable_embed(series, ids)
        v_enc = self.aux_encoder(v_aux)
        # keys/values broadcast across the per-variable decoder batch
        v_keys = ad.reshape(v_enc, v_enc.shape[:-2] + (1,) + v_enc.shape[-2:])
        tokens = self.patch_embed(ad.swapaxes(series, -1, -2))
        for layer in range(self.dims.L):
            tokens = self.decoder_layer(tokens, v_keys, layer)
        return self.projection(tokens)

    def u2u_forward(self, x) -> Tensor:
        """Univariate forecast: the target is copied in as its own auxiliary."""
        x = as_tensor(x)
        Z = ad.reshape(x, x.shape + (1,))
        return self.forward(x, Z, var_ids=[self.node.target_id])

    def predict(self, sample: ForecastSample) -> Tensor:
        """Forecast one assembled sample."""
        ids = sample.var_ids or None
        return self.forward(sample.x, sample.Z, var_ids=ids)


def shared_shape_map(model: PiXTime) -> dict[str, tuple]:
    """Name -> shape for the federated-shared parameter subset."""
    from .federation import is_shared  # local import avoids a cycle

    return {
        name: p.shape for name, p in model.params.items() if is_shared(name)
    }
