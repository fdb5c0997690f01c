#pragma once

#include <stdexcept>
#include <string>

namespace clmk {

// Base class for every error thrown by this library.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// ---- imaging ----
struct DegenerateImage : Error { using Error::Error; };
struct RectOutOfBounds : Error { using Error::Error; };

// ---- dataset ----
struct ParseError : Error {
    int line = 0;
    ParseError(int line_no, const std::string& reason)
        : Error("parse error at line " + std::to_string(line_no) + ": " + reason), line(line_no) {}
};
struct DuplicateFrame : Error { using Error::Error; };
struct InsufficientVideos : Error { using Error::Error; };
struct EmptySplit : Error { using Error::Error; };

// ---- sampling ----
struct MissingTrainClass : Error { using Error::Error; };
struct AllClassesExcluded : Error { using Error::Error; };

// ---- autodiff / model ----
struct ShapeMismatch : Error { using Error::Error; };
struct NotScalarLoss : Error { using Error::Error; };
struct EmptyTape : Error { using Error::Error; };
struct InvalidConfig : Error { using Error::Error; };

// ---- training / checkpoint ----
struct NonFiniteLoss : Error { using Error::Error; };
struct EmptyTrainSplit : Error { using Error::Error; };
struct BadMagic : Error { using Error::Error; };
struct VersionMismatch : Error { using Error::Error; };
struct Truncated : Error { using Error::Error; };

// ---- evaluation ----
struct EmptyMatrix : Error { using Error::Error; };
struct DegenerateData : Error { using Error::Error; };

// ---- generic ----
struct IoError : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };

} // namespace clmk
