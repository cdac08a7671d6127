"""Garment deformation as UV displacement textures, generated by a conditional DDPM."""

from .bake import (
    DisplacementTexture,
    NormalizationSpec,
    bake,
    export_png,
    load_disp,
    reconstruct_garment,
    sample_texture,
    save_disp,
)
from .dataset import DatasetManifest, build_dataset, desk_manifest, generate_procedural, load_frames
from .design import DesignParams, DesignTemplate, design_mesh
from .diffusion import NoiseSchedule, make_schedule, reverse_step, sample, training_loss
from .denoiser import Denoiser, TextureSet, TrainConfig, load_checkpoint, save_checkpoint, train
from .errors import (
    GarmentError,
    SingularTransformError,
    StructuralError,
    TrainingDivergenceError,
    ValidationError,
)
from .geometry import (
    BodyModel,
    GarmentMesh,
    Pose,
    SkinningWeights,
    desk_body,
    read_obj,
    resolve_collisions,
    skin,
    unpose,
    write_obj,
)
from .metrics import ErrorCurve, position_error, velocity_error
from .temporal import AugmentationConfig, augment, rollout, train_temporal

__version__ = "0.1.0"
