#pragma once

#include <algorithm>
#include <queue>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "drainsim/io.hpp"

namespace drainsim {

/// Manhole / junction with a spilling weir. Elevations are absolute [m].
struct Node {
    std::string id;
    double invert_elevation = 0.0;   // [m]
    double ground_elevation = 0.0;   // [m]
    double storage_area = 1.0;       // plan area converting stored volume to level [m²]
    double weir_crest = 0.0;         // crest elevation of the spilling weir [m]
    double weir_coefficient = 1.8;   // rectangular weir coefficient [-]
    double weir_width = 1.0;         // [m]
    bool is_outlet = false;
};

/// Circular pipe between two nodes.
struct Link {
    std::string id;
    std::string upstream_node;
    std::string downstream_node;
    double length = 0.0;            // [m]
    double diameter = 0.0;          // [m]
    double manning_n = 0.013;       // [s·m^(-1/3)]
    double upstream_invert = 0.0;   // [m]
    double downstream_invert = 0.0; // [m]
};

/// Rainfall-runoff unit draining to a single node.
struct Catchment {
    std::string node;
    double area = 0.0;               // [m²]
    double imperviousness = 0.0;     // [0,1]
    double initial_loss = 0.0;       // depression storage on the impervious part [mm]
    double horton_f0 = 72.0;         // initial infiltration capacity [mm/hr]
    double horton_fmin = 18.0;       // final infiltration capacity [mm/hr]
    double horton_k = 2.0;           // decay rate [1/hr]
    double concentration_time = 10.0;// linear-reservoir time constant [min]
};

class ValidationError : public std::runtime_error {
public:
    explicit ValidationError(std::vector<std::string> violations)
        : std::runtime_error(join(violations)), violations_(std::move(violations)) {}
    const std::vector<std::string>& violations() const { return violations_; }

private:
    static std::string join(const std::vector<std::string>& v) {
        std::string s = "network validation failed:";
        for (const auto& m : v) s += "\n  - " + m;
        return s;
    }
    std::vector<std::string> violations_;
};

/// A node is an "overflow" location when its weir crest sits at the pipe
/// crown (activates in ordinary storms); crests near ground level represent
/// pluvial flooding and are classified as "surcharge" locations.
enum class NodeClass { overflow, surcharge, outlet };

/**
 * Validated drainage network: a directed acyclic graph of nodes and links
 * with exactly one outlet, plus one catchment per non-outlet node.
 * Node/link ordering follows the source document and is part of the contract
 * (the state-vector layout below depends on it).
 */
class Network {
public:
    Network(std::vector<Node> nodes, std::vector<Link> links, std::vector<Catchment> catchments) {
        nodes_ = std::move(nodes);
        links_ = std::move(links);
        catchments_ = std::move(catchments);
        auto violations = validate(nodes_, links_, catchments_);
        if (!violations.empty()) throw ValidationError(std::move(violations));
        index();
    }

    static Network from_json(const nlohmann::json& doc);
    static Network from_file(const std::string& path) {
        nlohmann::json doc;
        try {
            doc = nlohmann::json::parse(slurp_file(path));
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError({std::string("cannot parse network document: ") + e.what()});
        }
        return from_json(doc);
    }

    /// Collect every invariant violation without constructing. Empty = valid.
    static std::vector<std::string> validate(const std::vector<Node>& nodes,
                                             const std::vector<Link>& links,
                                             const std::vector<Catchment>& catchments);

    int node_count() const { return static_cast<int>(nodes_.size()); }
    int link_count() const { return static_cast<int>(links_.size()); }
    const std::vector<Node>& nodes() const { return nodes_; }
    const std::vector<Link>& links() const { return links_; }
    const std::vector<Catchment>& catchments() const { return catchments_; }
    const Node& node(int i) const { return nodes_[i]; }
    const Link& link(int j) const { return links_[j]; }

    int node_index(const std::string& id) const {
        auto it = node_index_.find(id);
        if (it == node_index_.end()) throw ValidationError({"unknown node id: " + id});
        return it->second;
    }
    int link_index(const std::string& id) const {
        auto it = link_index_.find(id);
        if (it == link_index_.end()) throw ValidationError({"unknown link id: " + id});
        return it->second;
    }

    int outlet() const { return outlet_; }

    /// Links whose downstream end is this node (inflows), document order.
    const std::vector<int>& upstream_links(int node) const { return upstream_links_[node]; }
    /// Links whose upstream end is this node (outflows), document order.
    const std::vector<int>& downstream_links(int node) const { return downstream_links_[node]; }

    int link_upstream_node(int j) const { return link_up_[j]; }
    int link_downstream_node(int j) const { return link_dn_[j]; }

    /// Catchment attached to a node, or nullptr for the outlet.
    const Catchment* catchment_at(int node) const {
        int c = catchment_of_[node];
        return c >= 0 ? &catchments_[c] : nullptr;
    }

    /// Highest pipe soffit among the links meeting at this node [m].
    double pipe_crown_at(int node) const {
        double crown = nodes_[node].invert_elevation;
        for (int j : upstream_links_[node])
            crown = std::max(crown, links_[j].downstream_invert + links_[j].diameter);
        for (int j : downstream_links_[node])
            crown = std::max(crown, links_[j].upstream_invert + links_[j].diameter);
        return crown;
    }

    NodeClass classify(int node) const {
        if (node == outlet_) return NodeClass::outlet;
        // crest within 15 cm of the pipe crown counts as an overflow weir
        return nodes_[node].weir_crest <= pipe_crown_at(node) + 0.15 ? NodeClass::overflow
                                                                     : NodeClass::surcharge;
    }

private:
    void index() {
        for (int i = 0; i < node_count(); ++i) {
            node_index_[nodes_[i].id] = i;
            if (nodes_[i].is_outlet) outlet_ = i;
        }
        for (int j = 0; j < link_count(); ++j) link_index_[links_[j].id] = j;
        upstream_links_.assign(node_count(), {});
        downstream_links_.assign(node_count(), {});
        link_up_.resize(link_count());
        link_dn_.resize(link_count());
        for (int j = 0; j < link_count(); ++j) {
            link_up_[j] = node_index_[links_[j].upstream_node];
            link_dn_[j] = node_index_[links_[j].downstream_node];
            downstream_links_[link_up_[j]].push_back(j);
            upstream_links_[link_dn_[j]].push_back(j);
        }
        catchment_of_.assign(node_count(), -1);
        for (int c = 0; c < static_cast<int>(catchments_.size()); ++c)
            catchment_of_[node_index_[catchments_[c].node]] = c;
    }

    std::vector<Node> nodes_;
    std::vector<Link> links_;
    std::vector<Catchment> catchments_;
    std::unordered_map<std::string, int> node_index_, link_index_;
    std::vector<std::vector<int>> upstream_links_, downstream_links_;
    std::vector<int> link_up_, link_dn_, catchment_of_;
    int outlet_ = -1;
};

inline std::vector<std::string> Network::validate(const std::vector<Node>& nodes,
                                                  const std::vector<Link>& links,
                                                  const std::vector<Catchment>& catchments) {
    std::vector<std::string> out;
    std::unordered_map<std::string, int> nidx;
    for (int i = 0; i < static_cast<int>(nodes.size()); ++i) {
        const Node& n = nodes[i];
        if (n.id.empty()) out.push_back("node without id at position " + std::to_string(i));
        if (nidx.count(n.id)) out.push_back("duplicate node id: " + n.id);
        nidx[n.id] = i;
        if (!(n.ground_elevation > n.invert_elevation))
            out.push_back("node " + n.id + ": ground_elevation must exceed invert_elevation");
        if (!(n.invert_elevation <= n.weir_crest && n.weir_crest <= n.ground_elevation + 0.5))
            out.push_back("node " + n.id + ": weir_crest outside [invert, ground+0.5]");
        if (!(n.storage_area > 0)) out.push_back("node " + n.id + ": storage_area must be > 0");
        if (!(n.weir_width > 0)) out.push_back("node " + n.id + ": weir_width must be > 0");
        if (!(n.weir_coefficient > 0))
            out.push_back("node " + n.id + ": weir_coefficient must be > 0");
    }
    int outlets = 0;
    for (const Node& n : nodes)
        if (n.is_outlet) ++outlets;
    if (outlets == 0) out.push_back("no outlet node");
    if (outlets > 1) out.push_back("multiple outlets");

    std::unordered_map<std::string, int> lidx;
    for (int j = 0; j < static_cast<int>(links.size()); ++j) {
        const Link& l = links[j];
        if (lidx.count(l.id)) out.push_back("duplicate link id: " + l.id);
        lidx[l.id] = j;
        if (!(l.length > 0)) out.push_back("link " + l.id + ": length must be > 0");
        if (!(l.diameter > 0)) out.push_back("link " + l.id + ": diameter must be > 0");
        if (!(l.manning_n > 0)) out.push_back("link " + l.id + ": manning_n must be > 0");
        if (l.upstream_node == l.downstream_node)
            out.push_back("link " + l.id + ": upstream and downstream node coincide");
        if (!nidx.count(l.upstream_node))
            out.push_back("link " + l.id + ": dangling id '" + l.upstream_node + "'");
        if (!nidx.count(l.downstream_node))
            out.push_back("link " + l.id + ": dangling id '" + l.downstream_node + "'");
    }

    std::vector<int> catchment_count(nodes.size(), 0);
    for (const Catchment& c : catchments) {
        if (!nidx.count(c.node)) {
            out.push_back("catchment: dangling id '" + c.node + "'");
            continue;
        }
        int i = nidx[c.node];
        ++catchment_count[i];
        if (nodes[i].is_outlet) out.push_back("catchment attached to outlet node " + c.node);
        if (!(c.area > 0)) out.push_back("catchment " + c.node + ": area must be > 0");
        if (!(c.imperviousness >= 0 && c.imperviousness <= 1))
            out.push_back("catchment " + c.node + ": imperviousness outside [0,1]");
        if (!(c.horton_f0 >= c.horton_fmin && c.horton_fmin >= 0))
            out.push_back("catchment " + c.node + ": requires horton_f0 >= horton_fmin >= 0");
        if (!(c.initial_loss >= 0))
            out.push_back("catchment " + c.node + ": initial_loss must be >= 0");
        if (!(c.concentration_time > 0))
            out.push_back("catchment " + c.node + ": concentration_time must be > 0");
    }
    for (size_t i = 0; i < nodes.size(); ++i) {
        if (nodes[i].is_outlet) continue;
        if (catchment_count[i] == 0) out.push_back("node " + nodes[i].id + ": missing catchment");
        if (catchment_count[i] > 1) out.push_back("node " + nodes[i].id + ": duplicate catchment");
    }

    // graph checks only make sense once ids resolve
    if (!out.empty()) return out;

    // acyclicity (Kahn) and reachability of the outlet from every node
    std::vector<int> outdeg(nodes.size(), 0);
    std::vector<std::vector<int>> preds(nodes.size());
    for (const Link& l : links) {
        int u = nidx[l.upstream_node], v = nidx[l.downstream_node];
        ++outdeg[u];
        preds[v].push_back(u);
    }
    {
        std::vector<int> deg = outdeg;
        std::queue<int> q;
        for (size_t i = 0; i < nodes.size(); ++i)
            if (deg[i] == 0) q.push(static_cast<int>(i));
        int seen = 0;
        while (!q.empty()) {
            int v = q.front();
            q.pop();
            ++seen;
            for (int u : preds[v])
                if (--deg[u] == 0) q.push(u);
        }
        if (seen != static_cast<int>(nodes.size())) out.push_back("cycle detected");
    }
    if (outlets == 1) {
        int outlet = -1;
        for (size_t i = 0; i < nodes.size(); ++i)
            if (nodes[i].is_outlet) outlet = static_cast<int>(i);
        std::vector<char> reached(nodes.size(), 0);
        std::queue<int> q;
        q.push(outlet);
        reached[outlet] = 1;
        while (!q.empty()) {
            int v = q.front();
            q.pop();
            for (int u : preds[v])
                if (!reached[u]) {
                    reached[u] = 1;
                    q.push(u);
                }
        }
        for (size_t i = 0; i < nodes.size(); ++i)
            if (!reached[i]) out.push_back("node " + nodes[i].id + ": no path to the outlet");
    }
    return out;
}

inline Network Network::from_json(const nlohmann::json& doc) {
    std::vector<Node> nodes;
    std::vector<Link> links;
    std::vector<Catchment> catchments;
    try {
        for (const auto& jn : doc.at("nodes")) {
            Node n;
            n.id = jn.at("id").get<std::string>();
            n.invert_elevation = jn.at("invert_elevation").get<double>();
            n.ground_elevation = jn.at("ground_elevation").get<double>();
            n.storage_area = jn.at("storage_area").get<double>();
            n.weir_crest = jn.at("weir_crest").get<double>();
            n.weir_coefficient = jn.at("weir_coefficient").get<double>();
            n.weir_width = jn.at("weir_width").get<double>();
            n.is_outlet = jn.value("is_outlet", false);
            nodes.push_back(std::move(n));
        }
        for (const auto& jl : doc.at("links")) {
            Link l;
            l.id = jl.at("id").get<std::string>();
            l.upstream_node = jl.at("upstream_node").get<std::string>();
            l.downstream_node = jl.at("downstream_node").get<std::string>();
            l.length = jl.at("length").get<double>();
            l.diameter = jl.at("diameter").get<double>();
            l.manning_n = jl.at("manning_n").get<double>();
            l.upstream_invert = jl.at("upstream_invert").get<double>();
            l.downstream_invert = jl.at("downstream_invert").get<double>();
            links.push_back(std::move(l));
        }
        for (const auto& jc : doc.value("catchments", nlohmann::json::array())) {
            Catchment c;
            c.node = jc.at("node").get<std::string>();
            c.area = jc.at("area").get<double>();
            c.imperviousness = jc.at("imperviousness").get<double>();
            c.initial_loss = jc.at("initial_loss").get<double>();
            c.horton_f0 = jc.at("horton_f0").get<double>();
            c.horton_fmin = jc.at("horton_fmin").get<double>();
            c.horton_k = jc.at("horton_k").get<double>();
            c.concentration_time = jc.at("concentration_time").get<double>();
            catchments.push_back(std::move(c));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError({std::string("malformed network document: ") + e.what()});
    }
    return Network(std::move(nodes), std::move(links), std::move(catchments));
}

inline nlohmann::json network_to_json(const Network& net) {
    nlohmann::json nodes = nlohmann::json::array();
    for (const Node& n : net.nodes())
        nodes.push_back({{"id", n.id},
                         {"invert_elevation", n.invert_elevation},
                         {"ground_elevation", n.ground_elevation},
                         {"storage_area", n.storage_area},
                         {"weir_crest", n.weir_crest},
                         {"weir_coefficient", n.weir_coefficient},
                         {"weir_width", n.weir_width},
                         {"is_outlet", n.is_outlet}});
    nlohmann::json links = nlohmann::json::array();
    for (const Link& l : net.links())
        links.push_back({{"id", l.id},
                         {"upstream_node", l.upstream_node},
                         {"downstream_node", l.downstream_node},
                         {"length", l.length},
                         {"diameter", l.diameter},
                         {"manning_n", l.manning_n},
                         {"upstream_invert", l.upstream_invert},
                         {"downstream_invert", l.downstream_invert}});
    nlohmann::json catchments = nlohmann::json::array();
    for (const Catchment& c : net.catchments())
        catchments.push_back({{"node", c.node},
                              {"area", c.area},
                              {"imperviousness", c.imperviousness},
                              {"initial_loss", c.initial_loss},
                              {"horton_f0", c.horton_f0},
                              {"horton_fmin", c.horton_fmin},
                              {"horton_k", c.horton_k},
                              {"concentration_time", c.concentration_time}});
    return {{"nodes", nodes}, {"links", links}, {"catchments", catchments}};
}

/// Spec'd convenience wrapper: (inflow link ids, outflow link ids) of a node.
inline std::pair<std::vector<std::string>, std::vector<std::string>>
node_incidence(const Network& net, const std::string& node_id) {
    int i = net.node_index(node_id);
    std::pair<std::vector<std::string>, std::vector<std::string>> out;
    for (int j : net.upstream_links(i)) out.first.push_back(net.link(j).id);
    for (int j : net.downstream_links(i)) out.second.push_back(net.link(j).id);
    return out;
}

/**
 * Canonical flat state-vector layout shared by the solver and the surrogate:
 * positions [0,N) hold node levels h, [N,N+M) link flows Q, and - when
 * include_qw is set - [N+M,2N+M) node excess flows Q_w.
 */
struct StateLayout {
    int n_nodes = 0;
    int n_links = 0;
    bool include_qw = false;

    int size() const { return n_nodes + n_links + (include_qw ? n_nodes : 0); }
    int h_index(int node) const { return node; }
    int q_index(int link) const { return n_nodes + link; }
    int qw_index(int node) const { return n_nodes + n_links + node; }

    std::vector<std::string> names(const Network& net) const {
        std::vector<std::string> v;
        v.reserve(size());
        for (const Node& n : net.nodes()) v.push_back("h:" + n.id);
        for (const Link& l : net.links()) v.push_back("q:" + l.id);
        if (include_qw)
            for (const Node& n : net.nodes()) v.push_back("qw:" + n.id);
        return v;
    }

    bool operator==(const StateLayout&) const = default;
};

inline StateLayout state_layout(const Network& net, bool include_qw) {
    return StateLayout{net.node_count(), net.link_count(), include_qw};
}

}  // namespace drainsim
