"""Sparse-to-dense HRTF upsampling with a retrieval-augmented neural field.

The toolkit predicts a subject's full-grid HRTF set from a handful of
measured directions: it retrieves acoustically similar subjects from a
reference dataset, conditions a neural field on their magnitudes and ITDs,
and personalizes the prediction through low-rank per-subject parameters.
"""

__version__ = "0.1.0"

__all__ = ["__version__"]
