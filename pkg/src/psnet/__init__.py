"""Online teacher/student-cohort distillation for semi-supervised text
classification, on a from-scratch numpy autodiff engine."""

__version__ = "0.1.0"
