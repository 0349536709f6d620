from pcefusion.coattention import FusionLayer, FusionStack, MultiHeadAttention, attention
from pcefusion.component import Component
from pcefusion.crystal_graph import CrystalGraph, GraphEncoder, build_graph, gaussian_expand
from pcefusion.dataset import DatasetSplit, DeviceBatch, DeviceRecord, load_dataset, make_split
from pcefusion.metrics import CalibrationBin, MetricsReport, calibration_table, mae, picp, r2, spearman_rho
from pcefusion.model import ModelConfig, PCEFusionModel, PredictionDistribution, forward, mse_loss, nll_loss
from pcefusion.structure import CrystalStructure, parse_structure
from pcefusion.tensor import Tensor, backward
from pcefusion.text_encoder import LayerText, TextEncoder, Vocabulary, build_vocab, tokenize
from pcefusion.visualizer import make_image

__version__ = "0.1.0"
