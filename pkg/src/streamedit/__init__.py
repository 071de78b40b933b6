"""Streaming video editing with a compact recurrent spatial memory inside a
small diffusion denoiser: tensor engine, model, trainer, editor, benchmarks."""

from . import autodiff, diffusion, memory, metrics, model, streaming, svdt, training, video
from .diffusion import GuidanceConfig, build_schedule
from .model import Denoiser, DenoiserConfig, denoise_forward, load_checkpoint, save_checkpoint
from .streaming import EditSession, open_session
from .training import TrainConfig, train_base, train_memory_segment_level
from .video import LabeledVideo, VideoSpec, generate_video

__version__ = "0.1.0"
