#pragma once

#include <exception>
#include <string>

namespace oodkit {

// Broad classes of failure; the CLI maps these onto exit codes.
enum class ErrorClass {
    validation,  // bad input, bad params, malformed files
    capability,  // a detector needs model access the data source cannot provide
    io,
    numeric,     // convergence or singularity in a kernel
};

class Error : public std::exception {
public:
    Error(ErrorClass cls, const std::string& kind, const std::string& what)
        : cls_(cls), kind_(kind), message_(kind + ": " + what) {}

    const char* what() const noexcept override { return message_.c_str(); }
    ErrorClass error_class() const noexcept { return cls_; }
    const std::string& kind() const noexcept { return kind_; }

    // Adds context ahead of the message, e.g. "[knn/ood_test] ".
    void prefix(const std::string& context) { message_ = context + message_; }

private:
    ErrorClass cls_;
    std::string kind_;
    std::string message_;
};

#define OODKIT_DEFINE_ERROR(Name, Cls)                                    \
    class Name : public Error {                                           \
    public:                                                               \
        explicit Name(const std::string& what) : Error(Cls, #Name, what) {} \
    };

OODKIT_DEFINE_ERROR(InvalidInput, ErrorClass::validation)
OODKIT_DEFINE_ERROR(InvalidParam, ErrorClass::validation)
OODKIT_DEFINE_ERROR(InsufficientData, ErrorClass::validation)
OODKIT_DEFINE_ERROR(ShapeError, ErrorClass::validation)
OODKIT_DEFINE_ERROR(SchemaError, ErrorClass::validation)
OODKIT_DEFINE_ERROR(FormatError, ErrorClass::validation)
OODKIT_DEFINE_ERROR(HeadMismatchError, ErrorClass::validation)
OODKIT_DEFINE_ERROR(DegenerateLabels, ErrorClass::validation)
OODKIT_DEFINE_ERROR(DegenerateSample, ErrorClass::validation)
OODKIT_DEFINE_ERROR(DegenerateSubspace, ErrorClass::validation)
OODKIT_DEFINE_ERROR(DegenerateActivation, ErrorClass::validation)
OODKIT_DEFINE_ERROR(DegenerateHead, ErrorClass::validation)
OODKIT_DEFINE_ERROR(AllPruned, ErrorClass::validation)
OODKIT_DEFINE_ERROR(CapabilityError, ErrorClass::capability)
OODKIT_DEFINE_ERROR(IoError, ErrorClass::io)
OODKIT_DEFINE_ERROR(ConvergenceError, ErrorClass::numeric)
OODKIT_DEFINE_ERROR(SingularMatrix, ErrorClass::numeric)

#undef OODKIT_DEFINE_ERROR

}  // namespace oodkit
