#pragma once

// Small networks and helpers shared across the test suite.

#include <string>
#include <vector>

#include "drainsim/network.hpp"
#include "drainsim/rain.hpp"

namespace testsupport {

using namespace drainsim;

inline Node make_node(const std::string& id, double invert, bool outlet = false) {
    Node n;
    n.id = id;
    n.invert_elevation = invert;
    n.ground_elevation = invert + 2.5;
    n.storage_area = 2.0;
    n.weir_crest = invert + 2.4;
    n.weir_coefficient = 1.8;
    n.weir_width = 1.5;
    n.is_outlet = outlet;
    return n;
}

inline Link make_link(const std::string& id, const std::string& up, const std::string& dn,
                      double z_up, double z_dn, double length = 150.0, double diameter = 0.4) {
    Link l;
    l.id = id;
    l.upstream_node = up;
    l.downstream_node = dn;
    l.length = length;
    l.diameter = diameter;
    l.manning_n = 0.013;
    l.upstream_invert = z_up;
    l.downstream_invert = z_dn;
    return l;
}

inline Catchment make_catchment(const std::string& node, double area = 8000.0,
                                double imperviousness = 0.6) {
    Catchment c;
    c.node = node;
    c.area = area;
    c.imperviousness = imperviousness;
    c.initial_loss = 1.0;
    c.horton_f0 = 72.0;
    c.horton_fmin = 18.0;
    c.horton_k = 2.0;
    c.concentration_time = 8.0;
    return c;
}

/// n1 -> n2(outlet), one catchment on n1.
inline Network two_node_net() {
    return Network({make_node("n1", 11.0), make_node("n2", 10.0, true)},
                   {make_link("p1", "n1", "n2", 11.0, 10.0)}, {make_catchment("n1")});
}

/// Two branches joining before the outlet: a,b -> c -> out.
inline Network junction_net() {
    return Network({make_node("a", 12.0), make_node("b", 12.2), make_node("c", 11.0),
                    make_node("out", 10.0, true)},
                   {make_link("pa", "a", "c", 12.0, 11.0), make_link("pb", "b", "c", 12.2, 11.0),
                    make_link("pc", "c", "out", 11.0, 10.0, 150.0, 0.5)},
                   {make_catchment("a"), make_catchment("b"), make_catchment("c")});
}

/// Chain with a few side branches: 61 nodes, 60 links.
inline Network chain61_net() {
    std::vector<Node> nodes;
    std::vector<Link> links;
    std::vector<Catchment> catchments;
    const int spine = 53;  // spine nodes, the rest hang off it
    for (int i = 0; i < spine; ++i) {
        double z = 10.0 + 0.3 * (spine - 1 - i);
        nodes.push_back(make_node("s" + std::to_string(i), z, i == spine - 1));
        if (i > 0)
            links.push_back(make_link("ls" + std::to_string(i), "s" + std::to_string(i - 1),
                                      "s" + std::to_string(i), 10.0 + 0.3 * (spine - i),
                                      10.0 + 0.3 * (spine - 1 - i)));
        if (i < spine - 1) catchments.push_back(make_catchment("s" + std::to_string(i)));
    }
    for (int b = 0; b < 8; ++b) {
        int attach = 6 * b + 3;
        double z = 10.0 + 0.3 * (spine - 1 - attach) + 0.5;
        nodes.push_back(make_node("b" + std::to_string(b), z));
        links.push_back(make_link("lb" + std::to_string(b), "b" + std::to_string(b),
                                  "s" + std::to_string(attach), z, z - 0.5));
        catchments.push_back(make_catchment("b" + std::to_string(b)));
    }
    return Network(std::move(nodes), std::move(links), std::move(catchments));
}

inline RainSeries burst_series(const std::vector<std::pair<int, double>>& segments,
                               const std::string& id = "test") {
    RainSeries s;
    s.id = id;
    for (const auto& [len, intensity] : segments) s.intensity.insert(s.intensity.end(), len, intensity);
    return s;
}

}  // namespace testsupport
