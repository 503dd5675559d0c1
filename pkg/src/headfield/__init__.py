"""headfield: layered-head volume-conduction simulation and EEG signal-quality analysis."""

from .headmodel import (
    BudgetError,
    ConductivityGrid,
    ElectrodeShape,
    ElectrodeSpec,
    GeometrySpec,
    GradedGrid,
    NestingError,
    OverlapError,
    PatchSpec,
    Placement,
    PRESETS,
    Scene,
    Tissue,
    VesselSpec,
    build_scene,
    default_electrodes,
    default_tissue_table,
    make_grid,
    voxelate,
)
from .sources import (
    CubePair,
    Dipole,
    DirichletSet,
    RegionError,
    ResolutionError,
    SingularityError,
    SourceSet,
    dipole_point_potential,
    equivalent_cube_potential,
    impose_sources,
    sample_dipoles,
)
from .solver import (
    ConvergenceError,
    EmptyElectrodeError,
    LeadRow,
    LeadTable,
    PotentialField,
    SingularSystemError,
    assemble,
    electrode_potential,
    lead_table,
    reciprocal_lead,
    solve,
)
from .synth import EpspParams, SimRecording, amplitude_table, epsp_kernel, latencies, synthesize
from .analysis import (
    BandError,
    ComparisonReport,
    EpochSet,
    LengthError,
    NoTriggerError,
    Psd,
    Recording,
    ZeroVarianceError,
    anova_oneway,
    bandpass_5_40,
    compare_groups,
    epoch,
    max_bandwidth,
    noise_floor,
    reject_artifacts,
    sample_trials,
    select_top_channels,
    tukey_hsd,
    vep_amplitude,
    vep_snr,
    welch_psd,
)

__version__ = "0.1.0"
