"""The graph/text fusion model with its probabilistic head, its losses, and the two ablation baselines."""
from logging import getLogger
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, root_validator

from pcefusion import tensor as T
from pcefusion.coattention import ForwardContext, FusionStack
from pcefusion.component import Component
from pcefusion.crystal_graph import DEFAULT_NUM_CENTERS, GraphEncoder
from pcefusion.dataset import DeviceBatch
from pcefusion.errors import ContractError
from pcefusion.nn import MLP, Module
from pcefusion.tensor import DropoutStream, Tensor
from pcefusion.text_encoder import DEFAULT_MAX_TOKENS, TextEncoder

logger = getLogger(__name__)

ARCHITECTURES = ("coattention", "concat_mlp", "text_mlp")
HEADS = ("gaussian_nll", "mse")


class ModelConfig(BaseModel):
    """Hyperparameters of :class:`PCEFusionModel`.

    ``architecture`` selects the full co-attention model or one of the baselines; ``head`` selects the Gaussian
    negative log-likelihood head (mean and deviation outputs) or the mean-only squared-error head.
    """

    architecture: Literal["coattention", "concat_mlp", "text_mlp"] = "coattention"
    head: Literal["gaussian_nll", "mse"] = "gaussian_nll"
    d_node: int = 64
    d_edge: int = DEFAULT_NUM_CENTERS
    num_conv_layers: int = 3
    d_bert: int = 64
    text_heads: int = 4
    text_attention: bool = True
    max_tokens: int = DEFAULT_MAX_TOKENS
    d_model: int = 64
    num_heads: int = 4
    num_layers: int = 3
    mlp_dims: List[int] = [128, 64, 2]
    dropout: float = 0.2
    sigma2_min: float = 1e-6
    freeze_graph_encoder: bool = False
    freeze_text_encoder: bool = False
    standardize_targets: bool = False

    class Config:
        extra = "forbid"

    @root_validator(skip_on_failure=True)
    def check_shapes(cls, values):
        outputs = 2 if values["head"] == "gaussian_nll" else 1
        if not values["mlp_dims"] or values["mlp_dims"][-1] != outputs:
            raise ValueError(f"mlp_dims must end in {outputs} for the {values['head']} head")
        if values["d_model"] % values["num_heads"]:
            raise ValueError("d_model must be divisible by num_heads")
        if values["text_attention"] and values["d_bert"] % values["text_heads"]:
            raise ValueError("d_bert must be divisible by text_heads")
        if values["architecture"] == "coattention" and values["num_layers"] < 1:
            raise ValueError("the coattention architecture needs at least one fusion layer")
        if not 0.0 <= values["dropout"] < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if values["sigma2_min"] <= 0:
            raise ValueError("sigma2_min must be positive")
        for key in ("d_node", "d_edge", "d_bert", "d_model", "max_tokens"):
            if values[key] < 1:
                raise ValueError(f"{key} must be positive")
        return values


class PredictionDistribution(Component):
    """A predicted normal distribution over PCE.

    Attributes:
        mu (float): The mean, in percent.
        sigma (float): The standard deviation, in percent.
    """

    def __init__(self, mu: float, sigma: float):
        self.mu: float = mu
        self.sigma: float = sigma

    def to_dict(self) -> dict:
        """Convert this object into a dictionary."""
        return dict(mu=self.mu, sigma=self.sigma)

    def to_string(self) -> str:
        """Convert this object into a string."""
        return f"<PredictionDistribution, mu: {self.mu:.4f}, sigma: {self.sigma:.4f}>"


class PCEFusionModel(Module):
    """Encoders, fusion stack, pooling and MLP head.

    Attributes:
        config (ModelConfig): The hyperparameters.
        graph_encoder (GraphEncoder): The crystal-graph branch (absent for text_mlp).
        text_encoder (TextEncoder): The layer-text branch.
        fusion (FusionStack): Projections and fusion layers (absent for text_mlp; zero layers for concat_mlp).
        head (MLP): Maps the pooled vector to (mu_raw, s_raw), or to mu alone for the mse head.
    """

    def __init__(self, config: ModelConfig, vocab_size: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self._config = config
        self.text_encoder = TextEncoder(
            rng, vocab_size, config.d_bert, config.max_tokens, config.text_heads, config.text_attention
        )
        if config.architecture == "text_mlp":
            head_in = config.d_bert
        else:
            self.graph_encoder = GraphEncoder(rng, config.d_node, config.d_edge, config.num_conv_layers)
            num_layers = config.num_layers if config.architecture == "coattention" else 0
            self.fusion = FusionStack(rng, config.d_node, config.d_bert, config.d_model, config.num_heads, num_layers)
            head_in = 2 * config.d_model
        self.head = MLP(rng, head_in, config.mlp_dims)
        if config.freeze_graph_encoder and config.architecture != "text_mlp":
            self.graph_encoder.freeze()
        if config.freeze_text_encoder:
            self.text_encoder.freeze()
        self._dropout_stream = DropoutStream(seed)
        self._target_mean: float = 0.0
        self._target_std: float = 1.0

    @property
    def config(self) -> ModelConfig:
        return self._config

    @property
    def sigma_floor(self) -> float:
        return float(np.sqrt(self._config.sigma2_min))

    @property
    def target_stats(self) -> Tuple[float, float]:
        return self._target_mean, self._target_std

    def set_target_stats(self, mean: float, std: float) -> None:
        """Record the statistics used to z-score targets; ``(0, 1)`` means raw percent."""
        if std <= 0:
            raise ContractError(f"target std must be positive, got {std}")
        self._target_mean, self._target_std = float(mean), float(std)

    def scale_targets(self, y: np.ndarray) -> np.ndarray:
        return (np.asarray(y, dtype=np.float64) - self._target_mean) / self._target_std

    def parameter_groups(self, text_lr_multiplier: float) -> List[Tuple[List[Tensor], float]]:
        """Split parameters into (everything but the text encoder, 1.0) and (text encoder, multiplier)."""
        text_ids = {id(p) for p in self.text_encoder.parameters()}
        rest = [p for p in self.parameters() if id(p) not in text_ids]
        return [(rest, 1.0), (self.text_encoder.parameters(), text_lr_multiplier)]

    def context(self, training: bool, record_attention: bool = False) -> ForwardContext:
        return ForwardContext(training, self._config.dropout, self._dropout_stream, record_attention)

    def __call__(self, batch: DeviceBatch, ctx: Optional[ForwardContext] = None) -> Tuple[Tensor, Tensor]:
        """Run the model on a batch.

        Returns:
            A tuple of (mu, sigma), each of shape (B,), in the (possibly standardized) training scale.
        """
        ctx = ctx or self.context(training=False)
        h_text = self.text_encoder(batch.token_ids, ctx)
        if self._config.architecture == "text_mlp":
            pooled = T.mean(h_text, axis=1)
        else:
            if batch.atomic_numbers is None:
                raise ContractError("the batch carries no crystal graph")
            h_atoms = self.graph_encoder(batch.atomic_numbers, batch.src, batch.dst, batch.edge_features)
            b, n_max = batch.node_mask.shape
            padded = T.reshape(T.scatter_add(h_atoms, batch.node_positions, b * n_max), (b, n_max, -1))
            h_graph, h_text = self.fusion(padded, h_text, batch.node_mask, ctx)
            v_graph = T.masked_mean(h_graph, batch.node_mask[..., None], axis=1)
            pooled = T.concat([v_graph, T.mean(h_text, axis=1)], axis=-1)

        out = self.head(pooled)
        mu = out[:, 0]
        if self._config.head == "gaussian_nll":
            sigma = T.softplus(out[:, 1]) + self.sigma_floor
        else:
            sigma = Tensor(np.full(mu.shape, self.sigma_floor))
        return mu, sigma

    def to_percent(self, mu: np.ndarray, sigma: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Map outputs back from the training scale to PCE percent; sigma never drops below the floor."""
        return mu * self._target_std + self._target_mean, np.maximum(sigma * self._target_std, self.sigma_floor)

    def meta(self) -> Dict:
        """The record stored next to the parameters in a checkpoint."""
        return dict(model=self._config.dict(), target_mean=self._target_mean, target_std=self._target_std)


def forward(
    batch: DeviceBatch, model: PCEFusionModel, mode: str = "eval", ctx: Optional[ForwardContext] = None
) -> List[PredictionDistribution]:
    """Predict a distribution per device of ``batch``, in percent.

    In "train" mode dropout is active and the pass is recorded for differentiation.
    """
    assert mode in {"train", "eval"}
    ctx = ctx or model.context(training=mode == "train")
    if mode == "eval":
        with T.no_grad():
            mu, sigma = model(batch, ctx)
    else:
        mu, sigma = model(batch, ctx)
    mu, sigma = model.to_percent(mu.data, sigma.data)
    return [PredictionDistribution(float(m), float(s)) for m, s in zip(mu, sigma)]


def baseline_text_mlp(batch: DeviceBatch, model: PCEFusionModel) -> List[PredictionDistribution]:
    """Eval-mode predictions of the text-only baseline: mean-pooled layer embeddings into the MLP head."""
    if model.config.architecture != "text_mlp":
        raise ContractError(f"expected a text_mlp model, got {model.config.architecture}")
    return forward(batch, model)


def baseline_concat_mlp(batch: DeviceBatch, model: PCEFusionModel) -> List[PredictionDistribution]:
    """Eval-mode predictions of the concatenation baseline: pooled graph and text vectors, no co-attention."""
    if model.config.architecture != "concat_mlp":
        raise ContractError(f"expected a concat_mlp model, got {model.config.architecture}")
    return forward(batch, model)


def nll_loss(mu: Tensor, sigma: Tensor, targets) -> Tensor:
    """Gaussian negative log-likelihood without its constant term.

    ``L = 1/(2B) * sum_i (log sigma_i^2 + (y_i - mu_i)^2 / sigma_i^2)``
    """
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    if mu.shape != targets.shape or sigma.shape != targets.shape or len(targets) == 0:
        raise ContractError(f"mu {mu.shape}, sigma {sigma.shape} and targets {targets.shape} must match")
    if np.any(sigma.data <= 0):
        raise ContractError("sigma must be positive")
    variance = T.square(sigma)
    return 0.5 * T.mean(T.log(variance) + T.square(Tensor(targets) - mu) / variance)


def mse_loss(mu: Tensor, targets) -> Tensor:
    """Mean squared error of the predicted means."""
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    if mu.shape != targets.shape or len(targets) == 0:
        raise ContractError(f"mu {mu.shape} and targets {targets.shape} must match")
    return T.mean(T.square(Tensor(targets) - mu))


def loss_fn(model: PCEFusionModel, mu: Tensor, sigma: Tensor, targets) -> Tensor:
    """The training loss of ``model``'s head variant."""
    if model.config.head == "gaussian_nll":
        return nll_loss(mu, sigma, targets)
    return mse_loss(mu, targets)
