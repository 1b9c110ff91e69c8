"""raytomo: 2D ultrasound transmission tomography on a transducer ring.

Reconstructs sound-speed maps from boundary pressure spectra by Gauss-Newton
minimization against a ray-approximated heterogeneous Green's function
forward model, initialized from first-arrival travel times.
"""

__version__ = "0.1.0"

from .grids import ConfigError, DomainError, Grid2D, ScalarField, make_grid, smooth_field
from .medium import (
    EllipseInclusion,
    Medium,
    TransducerRing,
    alpha0_db_to_internal,
    alpha0_internal_to_db,
    desk_grid,
    dispersion_wavenumber,
    make_phantom,
    tan_dispersion_factor,
    water_medium,
)
from .rays import (
    LinkConfig,
    LinkedRaySet,
    LinkFailure,
    Ray,
    acoustic_length,
    link_all,
    link_ray,
    trace_ray,
)
from .greens import (
    RayGreens,
    SourceSpectrum,
    SpectraSet,
    accumulate_absorption,
    accumulate_phase,
    amp_geometric,
    forward_model,
    greens_along_ray,
    greens_from_receiver,
    greens_homogeneous_2d,
    pair_tables,
    ray_jacobian,
    reversed_ray,
    spectra_from_tables,
)
from .inversion import (
    BornOperator,
    FrequencySchedule,
    GriddingConfig,
    InversionResult,
    cg_subproblem,
    default_schedule,
    grid_greens,
    invert,
    objective,
    relative_error,
    residual,
    scattering_potential,
)
from .medium import PHANTOM_PRESETS, phantom_preset
from .simulate import SimConfig, simulate_data, synthesize_timeseries
from .tof import (
    TimeSeriesSet,
    TofResult,
    TofSinogram,
    pick_first_arrival,
    tof_invert,
    tof_sinogram,
)
from . import io  # noqa: F401  (submodule re-export for raytomo.io.*)

__all__ = [name for name in dir() if not name.startswith("_")]
