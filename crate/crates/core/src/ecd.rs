//! Placeholder module; implemented in a later step.
