//! Dataset, sampler, and data-loader abstractions.
