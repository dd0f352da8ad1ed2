#pragma once

#include <stdexcept>
#include <string>

namespace ganseg {

// Base of all library errors.
struct error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor shapes or dimensionalities do not satisfy an operation's contract.
struct shape_error : error {
    using error::error;
};

// Inputs contain non-finite values or values outside the admissible domain.
struct invalid_input_error : error {
    using error::error;
};

// A label value is outside the configured class range.
struct invalid_label_error : invalid_input_error {
    using invalid_input_error::invalid_input_error;
};

// A caller violated an API precondition (mismatched pairs, missing argument).
struct contract_error : error {
    using error::error;
};

// Geometry does not admit the requested operation (volume smaller than patch, ...).
struct invalid_geometry_error : error {
    using error::error;
};

// Input is degenerate for the requested statistic (zero-variance modality, ...).
struct degenerate_input_error : error {
    using error::error;
};

// An external preprocessing step failed or returned malformed data.
struct preprocessing_error : error {
    using error::error;
};

// Run configuration is inconsistent or cannot be satisfied by the cohort.
struct config_error : error {
    using error::error;
};

// Filesystem / serialization failure.
struct io_error : error {
    using error::error;
};

// A metric is undefined for the given inputs (e.g. surface distance of an empty mask).
struct undefined_metric_error : error {
    using error::error;
};

// Training hit a non-finite loss and was aborted.
struct training_error : error {
    using error::error;
};

} // namespace ganseg
