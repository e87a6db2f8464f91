//! Experiment runner library.
