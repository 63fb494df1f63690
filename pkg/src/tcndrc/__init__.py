"""Efficient causal temporal convolutional networks for modeling dynamic range compression."""

from .audio import AudioBuffer, Spectrogram, read_wav, stft, write_wav
from .device import (
    CompressorSettings,
    DatasetManifest,
    compress,
    generate_dataset,
    map_controls,
    subset,
)
from .metrics import LoudnessReading, evaluate, integrated_loudness, loudness_error
from .model import (
    ControlParams,
    ReceptiveField,
    TcnConfig,
    build_model,
    load_checkpoint,
    preset,
    receptive_field,
    save_checkpoint,
)
from .streaming import BenchReport, StreamState, benchmark, process_block, real_time_factor
from .training import (
    LossConfig,
    LossReport,
    TrainConfig,
    adam_step,
    augment,
    loss_freq,
    loss_time,
    lr_schedule,
    train,
)

__version__ = "0.1.0"
