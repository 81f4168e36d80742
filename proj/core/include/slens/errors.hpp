#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace slens {

enum class errc {
    format,            // malformed checkpoint bytes
    unsupported_dtype, // dtype string we do not handle
    resolution,        // name template did not resolve
    shape,             // tensor/argument dimensions inconsistent
    range,             // index out of range
    input,             // bad user input (ids, corpus, flags)
    convergence,       // iteration budget exhausted
    ill_conditioned,   // solve rejected by condition estimate
    numeric,           // non-finite value produced
    domain,            // argument outside mathematical domain
    config,            // bad configuration (quant roles, spec fields)
    incomparable,      // signatures with mismatching dimensions
    construction,      // infeasible synthetic-model spec
    empty_collection,  // nothing matched (e.g. no high-norm tokens)
};

class error : public std::runtime_error {
public:
    error(errc kind, const std::string & msg) : std::runtime_error(msg), kind_(kind) {}
    errc kind() const { return kind_; }

private:
    errc kind_;
};

// convergence failures carry the best iterate so callers can inspect it
class convergence_error : public error {
public:
    convergence_error(const std::string & msg, double best_residual,
                      std::vector<float> best_vector = {}, double best_value = 0.0)
        : error(errc::convergence, msg),
          best_residual(best_residual),
          best_vector(std::move(best_vector)),
          best_value(best_value) {}

    double best_residual;
    std::vector<float> best_vector;
    double best_value;
};

} // namespace slens
