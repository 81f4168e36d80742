#include "slens/signature.hpp"

#include "slens/util.hpp"

#include <json.hpp>

#include <algorithm>
#include <functional>
#include <cmath>

namespace slens {

using nlohmann::ordered_json;

model_signature make_model_signature(const defect_report & report,
                                     const layer_classification & classification,
                                     const std::string & model_id) {
    model_signature sig;
    sig.model_id = model_id;
    sig.d = report.d;
    sig.n_layers = report.n_layers;
    for (const auto & rec : report.layers) {
        sig.directions.push_back(rec.defect_direction);
    }
    if (!classification.explosion_layers.empty()) {
        sig.preferred_layer = classification.explosion_layers.front();
    } else if (!classification.decay_layers.empty()) {
        sig.preferred_layer = classification.decay_layers.front();
    }
    return sig;
}

distance_result model_distance(const model_signature & a, const model_signature & b) {
    if (a.d != b.d) {
        throw error(errc::incomparable, "model_distance: hidden dimensions differ (" +
                                            std::to_string(a.d) + " vs " + std::to_string(b.d) + ")");
    }
    const size_t layers = std::min(a.directions.size(), b.directions.size());
    if (layers == 0) {
        throw error(errc::incomparable, "model_distance: no layers to compare");
    }
    distance_result out;
    out.truncated = a.directions.size() != b.directions.size();
    double best = 90.0;
    for (size_t l = 0; l < layers; ++l) {
        best = std::min(best, acute_angle(a.directions[l], b.directions[l]));
    }
    out.degrees = best;
    return out;
}

distance_matrix_result distance_matrix(const std::vector<model_signature> & sigs) {
    distance_matrix_result out;
    const int64_t n = int64_t(sigs.size());
    out.degrees = matf(n, n);
    out.comparable.assign(size_t(n), std::vector<bool>(size_t(n), true));
    for (const auto & s : sigs) {
        out.labels.push_back(s.model_id);
    }
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = i + 1; j < n; ++j) {
            try {
                distance_result d = model_distance(sigs[size_t(i)], sigs[size_t(j)]);
                out.degrees.at(i, j) = float(d.degrees);
                out.degrees.at(j, i) = float(d.degrees);
            } catch (const error &) {
                out.comparable[size_t(i)][size_t(j)] = false;
                out.comparable[size_t(j)][size_t(i)] = false;
                out.degrees.at(i, j) = 90.0f;
                out.degrees.at(j, i) = 90.0f;
            }
        }
    }
    return out;
}

std::string distance_matrix_csv(const distance_matrix_result & m) {
    std::string out = "model";
    for (const auto & l : m.labels) {
        out += "," + l;
    }
    out += "\n";
    for (size_t i = 0; i < m.labels.size(); ++i) {
        out += m.labels[i];
        for (size_t j = 0; j < m.labels.size(); ++j) {
            out += ",";
            if (m.comparable[i][j]) {
                out += fmt_float(double(m.degrees.at(int64_t(i), int64_t(j))));
            }
        }
        out += "\n";
    }
    return out;
}

std::string distance_matrix_heat(const distance_matrix_result & m) {
    // block shade by closeness; a dot marks incomparable pairs
    auto shade = [](double deg) {
        if (deg < 10.0) return "##";
        if (deg < 30.0) return "++";
        if (deg < 60.0) return "--";
        return "  ";
    };
    size_t width = 5;
    for (const auto & l : m.labels) {
        width = std::max(width, l.size());
    }
    std::string out(width + 1, ' ');
    for (const auto & l : m.labels) {
        out += l.substr(0, 4);
        out.append(5 - std::min<size_t>(4, l.size()), ' ');
    }
    out += "\n";
    for (size_t i = 0; i < m.labels.size(); ++i) {
        out += m.labels[i];
        out.append(width + 1 - m.labels[i].size(), ' ');
        for (size_t j = 0; j < m.labels.size(); ++j) {
            double deg = double(m.degrees.at(int64_t(i), int64_t(j)));
            std::string cell = m.comparable[i][j] ? shade(deg) : "..";
            out += "[" + cell + "] ";
        }
        out += "\n";
    }
    return out;
}

std::vector<std::vector<size_t>> single_linkage_clusters(const distance_matrix_result & m,
                                                         double threshold_degrees) {
    const size_t n = m.labels.size();
    std::vector<size_t> parent(n, 0);
    for (size_t i = 0; i < n; ++i) {
        parent[i] = i;
    }
    std::function<size_t(size_t)> find = [&](size_t x) {
        while (parent[x] != x) {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        return x;
    };
    for (size_t i = 0; i < n; ++i) {
        for (size_t j = i + 1; j < n; ++j) {
            if (m.comparable[i][j] && double(m.degrees.at(int64_t(i), int64_t(j))) <= threshold_degrees) {
                parent[find(i)] = find(j);
            }
        }
    }
    std::vector<std::vector<size_t>> groups;
    std::vector<int64_t> group_of(n, -1);
    for (size_t i = 0; i < n; ++i) {
        size_t r = find(i);
        if (group_of[r] < 0) {
            group_of[r] = int64_t(groups.size());
            groups.emplace_back();
        }
        groups[size_t(group_of[r])].push_back(i);
    }
    return groups;
}

std::string model_signature::to_json() const {
    ordered_json j;
    j["model_id"] = model_id;
    j["d"] = d;
    j["n_layers"] = n_layers;
    if (preferred_layer) {
        j["preferred_layer"] = *preferred_layer;
    } else {
        j["preferred_layer"] = nullptr;
    }
    ordered_json dirs = ordered_json::array();
    for (const auto & v : directions) {
        dirs.push_back(base64_encode_f32(v));
    }
    j["directions"] = dirs;
    return j.dump(2);
}

model_signature model_signature::from_json(const std::string & text) {
    ordered_json j;
    try {
        j = ordered_json::parse(text);
    } catch (const std::exception & e) {
        throw error(errc::format, std::string("signature json: ") + e.what());
    }
    model_signature s;
    s.model_id = j["model_id"].get<std::string>();
    s.d = j["d"].get<int64_t>();
    s.n_layers = j["n_layers"].get<int64_t>();
    if (j.contains("preferred_layer") && !j["preferred_layer"].is_null()) {
        s.preferred_layer = j["preferred_layer"].get<int64_t>();
    }
    for (const auto & dv : j["directions"]) {
        vecf dir = base64_decode_f32(dv.get<std::string>());
        if (int64_t(dir.size()) != s.d) {
            throw error(errc::format, "signature json: direction length != d");
        }
        s.directions.push_back(std::move(dir));
    }
    if (int64_t(s.directions.size()) != s.n_layers) {
        throw error(errc::format, "signature json: direction count != n_layers");
    }
    return s;
}

} // namespace slens
