"""Desk-scale testbed: synthetic attention, toy diffusion, scene scoring."""

from .scenes import (  # noqa: F401
    LEVELS,
    SHAPES,
    TOKEN_IDS,
    VOCAB,
    SceneObject,
    SceneSpec,
    render_scene,
    respread_scene,
    sample_scene,
    score_image,
    shape_template,
)
from .synthetic import (  # noqa: F401
    QUALITY_LAWS,
    SynthCoupling,
    generate_synthetic_records,
    make_synthetic_record,
    synth_generate,
    write_synthetic_dataset,
)
from .toy import (  # noqa: F401
    ToyDiffusionConfig,
    ToyModel,
    cosine_schedule,
    load_model,
    sample_trajectories,
    save_model,
    toy_sample,
    toy_train,
)
