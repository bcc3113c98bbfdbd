#include "moediff/trace.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "moediff/errors.hpp"

namespace moediff {

using json = nlohmann::ordered_json;

double sig9(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return std::strtod(buf, nullptr);
}

namespace {

json positions_json(const std::vector<int>& v) { return json(v); }

json class_map_json(const std::map<int, TokenClass>& classes) {
    json j = json::object();
    for (const auto& [p, c] : classes) j[std::to_string(p)] = token_class_name(c);
    return j;
}

TokenClass class_from_name(const std::string& name) {
    if (name == "hot") return TokenClass::hot;
    if (name == "cold") return TokenClass::cold;
    if (name == "newly_accepted") return TokenClass::newly_accepted;
    if (name == "cached") return TokenClass::cached;
    if (name == "speculated") return TokenClass::speculated;
    throw ComparisonError("unknown token class '" + name + "' in trace");
}

json routing_json(const RoutingRecord& r) {
    json j = json::object();
    j["layer"] = r.layer;
    j["pos"] = r.token_position;
    j["experts"] = r.expert_ids;
    json weights = json::array();
    for (double w : r.gate_weights) weights.push_back(sig9(w));
    j["weights"] = std::move(weights);
    j["restricted"] = r.restricted;
    return j;
}

RoutingRecord routing_from_json(const json& j) {
    RoutingRecord r;
    r.layer = j.at("layer").get<int>();
    r.token_position = j.at("pos").get<int>();
    r.expert_ids = j.at("experts").get<std::vector<int>>();
    r.gate_weights = j.at("weights").get<std::vector<double>>();
    r.restricted = j.at("restricted").get<bool>();
    return r;
}

}  // namespace

std::string step_to_json(const StepTrace& s) {
    json j = json::object();
    j["schema_version"] = kTraceSchemaVersion;
    j["block"] = s.block_index;
    j["iteration"] = s.iteration;
    j["commit"] = s.commit;
    j["refresh"] = s.refresh;
    j["lac_fallback"] = s.lac_fallback;
    j["branch_count"] = s.branch_count;
    j["active"] = positions_json(s.active_positions);
    j["masked"] = positions_json(s.masked_positions);
    if (s.has_classes) j["classes"] = class_map_json(s.classes);

    json confs = json::object();
    for (const auto& [p, c] : s.confidences) confs[std::to_string(p)] = sig9(c);
    j["confidences"] = std::move(confs);

    json accepted = json::array();
    for (const auto& a : s.accepted) {
        json ja = json::object();
        ja["pos"] = a.position;
        ja["token"] = a.token;
        ja["conf"] = sig9(a.confidence);
        ja["forced"] = a.forced;
        ja["speculated"] = a.speculated;
        accepted.push_back(std::move(ja));
    }
    j["accepted"] = std::move(accepted);

    if (s.branches) {
        json jb = json::object();
        jb["branch_count"] = s.branches->branch_count;
        jb["confirmed"] = s.branches->confirmed_prefix;
        json specs = json::array();
        for (const auto& sp : s.branches->speculations) {
            json js = json::object();
            js["pos"] = sp.position;
            js["token"] = sp.token;
            js["candidate_conf"] = sig9(sp.candidate_confidence);
            js["verify_pred"] = sp.verify_prediction;
            js["verify_conf"] = sig9(sp.verify_confidence);
            js["confirmed"] = sp.confirmed;
            specs.push_back(std::move(js));
        }
        jb["speculations"] = std::move(specs);
        j["branches"] = std::move(jb);
    }

    json layers = json::array();
    for (const auto& lt : s.layers) {
        json jl = json::object();
        jl["layer"] = lt.layer;
        jl["experts"] = lt.experts;
        jl["experts_decoded"] = lt.experts_decoded;
        jl["experts_masked"] = lt.experts_masked;
        if (s.has_classes) {
            jl["experts_hot"] = lt.experts_hot;
            jl["experts_cold"] = lt.experts_cold;
            jl["experts_speculated"] = lt.experts_speculated;
        }
        if (lt.necessary) jl["necessary"] = *lt.necessary;
        json routing = json::array();
        for (const auto& r : lt.routing) routing.push_back(routing_json(r));
        jl["routing"] = std::move(routing);
        layers.push_back(std::move(jl));
    }
    j["layers"] = std::move(layers);

    if (!s.hidden.empty()) {
        json jh = json::object();
        for (const auto& [layer, by_pos] : s.hidden) {
            json jp = json::object();
            for (const auto& [pos, vec] : by_pos) {
                json arr = json::array();
                for (double v : vec) arr.push_back(sig9(v));
                jp[std::to_string(pos)] = std::move(arr);
            }
            jh[std::to_string(layer)] = std::move(jp);
        }
        j["hidden"] = std::move(jh);
    }
    return j.dump();
}

StepTrace step_from_json(const std::string& line) {
    json j;
    try {
        j = json::parse(line);
    } catch (const json::exception& e) {
        throw ComparisonError(std::string("trace line is not valid JSON: ") + e.what());
    }
    const int version = j.value("schema_version", -1);
    if (version != kTraceSchemaVersion) {
        throw SchemaMismatchError("trace schema_version " + std::to_string(version) +
                                  " unsupported (expected " +
                                  std::to_string(kTraceSchemaVersion) + ")");
    }
    StepTrace s;
    s.block_index = j.at("block").get<int>();
    s.iteration = j.at("iteration").get<int>();
    s.commit = j.at("commit").get<bool>();
    s.refresh = j.at("refresh").get<bool>();
    s.lac_fallback = j.at("lac_fallback").get<bool>();
    s.branch_count = j.at("branch_count").get<int>();
    s.active_positions = j.at("active").get<std::vector<int>>();
    s.masked_positions = j.at("masked").get<std::vector<int>>();
    if (j.contains("classes")) {
        s.has_classes = true;
        for (const auto& [key, value] : j.at("classes").items()) {
            s.classes[std::stoi(key)] = class_from_name(value.get<std::string>());
        }
    }
    for (const auto& [key, value] : j.at("confidences").items()) {
        s.confidences[std::stoi(key)] = value.get<double>();
    }
    for (const auto& ja : j.at("accepted")) {
        AcceptedToken a;
        a.position = ja.at("pos").get<int>();
        a.token = ja.at("token").get<int>();
        a.confidence = ja.at("conf").get<double>();
        a.forced = ja.at("forced").get<bool>();
        a.speculated = ja.at("speculated").get<bool>();
        s.accepted.push_back(a);
    }
    if (j.contains("branches")) {
        BranchTrace b;
        const auto& jb = j.at("branches");
        b.branch_count = jb.at("branch_count").get<int>();
        b.confirmed_prefix = jb.at("confirmed").get<int>();
        for (const auto& js : jb.at("speculations")) {
            SpeculationTrace sp;
            sp.position = js.at("pos").get<int>();
            sp.token = js.at("token").get<int>();
            sp.candidate_confidence = js.at("candidate_conf").get<double>();
            sp.verify_prediction = js.at("verify_pred").get<int>();
            sp.verify_confidence = js.at("verify_conf").get<double>();
            sp.confirmed = js.at("confirmed").get<bool>();
            b.speculations.push_back(sp);
        }
        s.branches = std::move(b);
    }
    for (const auto& jl : j.at("layers")) {
        LayerTrace lt;
        lt.layer = jl.at("layer").get<int>();
        lt.experts = jl.at("experts").get<std::vector<int>>();
        lt.experts_decoded = jl.at("experts_decoded").get<std::vector<int>>();
        lt.experts_masked = jl.at("experts_masked").get<std::vector<int>>();
        if (jl.contains("experts_hot")) {
            lt.experts_hot = jl.at("experts_hot").get<std::vector<int>>();
            lt.experts_cold = jl.at("experts_cold").get<std::vector<int>>();
            lt.experts_speculated = jl.at("experts_speculated").get<std::vector<int>>();
        }
        if (jl.contains("necessary")) lt.necessary = jl.at("necessary").get<std::vector<int>>();
        for (const auto& jr : jl.at("routing")) lt.routing.push_back(routing_from_json(jr));
        s.layers.push_back(std::move(lt));
    }
    if (j.contains("hidden")) {
        for (const auto& [lkey, by_pos] : j.at("hidden").items()) {
            for (const auto& [pkey, vec] : by_pos.items()) {
                s.hidden[std::stoi(lkey)][std::stoi(pkey)] = vec.get<std::vector<double>>();
            }
        }
    }
    return s;
}

std::string traces_to_jsonl(const std::vector<StepTrace>& traces) {
    std::string out;
    for (const auto& s : traces) {
        out += step_to_json(s);
        out += '\n';
    }
    return out;
}

std::vector<StepTrace> traces_from_jsonl(const std::string& text) {
    std::vector<StepTrace> out;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        out.push_back(step_from_json(line));
    }
    return out;
}

void save_traces(const std::vector<StepTrace>& traces, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path + " for writing");
    os << traces_to_jsonl(traces);
    if (!os) throw IoError("write failed for " + path);
}

std::vector<StepTrace> load_traces(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open trace file " + path);
    std::ostringstream buf;
    buf << is.rdbuf();
    return traces_from_jsonl(buf.str());
}

}  // namespace moediff
