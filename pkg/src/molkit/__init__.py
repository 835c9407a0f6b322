"""Monotone operator learning for undersampled multi-coil Fourier imaging."""

from .imaging import (
    CoilMaps,
    ComplexImage,
    KSpaceData,
    SamplingMask,
    fft2c,
    generate_coil_maps,
    generate_mask,
    generate_phantom,
    ifft2c,
    load_dataset,
    psnr,
    save_dataset,
)
from .linops import SenseModel, adjoint_test, gram_apply, sense_adjoint, sense_apply
from .solvers import (
    FixedPointResult,
    SolverConfig,
    alpha_max,
    conjugate_gradient,
    contraction_rate,
    estimate_rate,
    fixed_point_iterate,
)
from .denoiser import (
    ConvLayer,
    DenoiserNet,
    LipschitzEstimate,
    estimate_local_lipschitz,
    estimate_monotonicity,
    load_checkpoint,
    make_denoiser,
    save_checkpoint,
    spectral_normalize,
    vjp,
)
from .denoiser import forward as denoiser_forward
from .mol import (
    MOLConfig,
    TrainConfig,
    TrainSample,
    compute_z,
    deq_backward,
    memory_report,
    reconstruct_modl,
    reconstruct_mol,
    reconstruct_sense,
    t_mol,
    train,
)
from .robustness import (
    MethodSpec,
    PerturbationReport,
    adversarial_attack,
    gaussian_perturb,
    robustness_bound,
    sweep,
    verify_bound,
)

__version__ = "0.1.0"
