from .denoiser import MLPDenoiser, timestep_embedding
from .schedule import (NoiseSchedule, add_noise, build_schedule, diffusion_loss, sample_timestep,
                       timestep_intervals)
from .tokens import LatentVideo, TokenSequence, concat_text, patchify, split_concat, unpatchify
from .training import (REFERENCE_STAGES, AdamW, StageConfig, ToyPairSampler, TrainingDiverged,
                       evaluate_loss, load_checkpoint, reverse_step, run_progressive, run_stage,
                       sample_latents, save_checkpoint)

__all__ = [
    "MLPDenoiser", "timestep_embedding", "NoiseSchedule", "add_noise", "build_schedule",
    "diffusion_loss", "sample_timestep", "timestep_intervals", "LatentVideo", "TokenSequence",
    "concat_text", "patchify", "split_concat", "unpatchify", "REFERENCE_STAGES", "AdamW",
    "StageConfig", "ToyPairSampler", "TrainingDiverged", "evaluate_loss", "load_checkpoint",
    "reverse_step", "run_progressive", "run_stage", "sample_latents", "save_checkpoint",
]
