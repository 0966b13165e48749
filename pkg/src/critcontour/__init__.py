"""Critical-contour analysis of shaded images.

The pipeline: render synthetic height-field surfaces under a class of
normal-based cues, extract Morse-Smale complexes from the images, score
1-cells by their transversal derivative strength, verify that strong
contours stay put across renderings and align with the slant complex,
and reconstruct slant from the contour scaffold.
"""

from .errors import ArgumentError, DomainError, NumericalError, SpecError
from .field import (
    DerivativeProbe,
    GaussianJet,
    ScalarField,
    derivatives_at,
    gaussian_smooth,
    gradient_field,
    read_field,
    write_field,
)
from .surface import (
    HeightField,
    NormalField,
    SlantField,
    gaussian_curvature,
    make_blob,
    make_furrow,
    make_rotated_sigmoid,
    normals_of,
    slant_of,
)
from .render import (
    AdmissibilityReport,
    GenericityReport,
    HemisphereTable,
    RenderingSpec,
    attached_shadows,
    check_admissibility,
    check_genericity,
    render,
)

__version__ = "0.1.0"
