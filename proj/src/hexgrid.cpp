#include "hexfed/hexgrid.hpp"

#include <cmath>
#include <numbers>

namespace hexfed {

namespace {

constexpr double kEarthRadiusKm = 6371.0088;
constexpr double kDegToRad = std::numbers::pi / 180.0;
constexpr double kSqrt3 = 1.7320508075688772;

}  // namespace

bool is_finite(const GeoPoint& p) { return std::isfinite(p.lat) && std::isfinite(p.lon); }

void validate(const GeoPoint& p) {
    if (!is_finite(p)) throw InvalidInputError("GeoPoint has non-finite coordinates");
    if (p.lat < -90.0 || p.lat > 90.0) throw InvalidInputError("latitude out of [-90, 90]");
    if (p.lon < -180.0 || p.lon > 180.0) throw InvalidInputError("longitude out of [-180, 180]");
}

void validate(const GridSpec& spec) {
    validate(spec.origin);
    if (!(spec.edge_km > 0.0) || !std::isfinite(spec.edge_km))
        throw InvalidInputError("GridSpec.edge_km must be positive and finite");
}

PlanarKm project(const GeoPoint& p, const GeoPoint& origin) {
    const double cos_lat0 = std::cos(origin.lat * kDegToRad);
    return PlanarKm{(p.lon - origin.lon) * kDegToRad * kEarthRadiusKm * cos_lat0,
                    (p.lat - origin.lat) * kDegToRad * kEarthRadiusKm};
}

GeoPoint unproject(const PlanarKm& xy, const GeoPoint& origin) {
    const double cos_lat0 = std::cos(origin.lat * kDegToRad);
    return GeoPoint{origin.lat + xy.y / kEarthRadiusKm / kDegToRad,
                    origin.lon + xy.x / (kEarthRadiusKm * cos_lat0) / kDegToRad};
}

double planar_distance_km(const GeoPoint& a, const GeoPoint& b, const GeoPoint& origin) {
    const PlanarKm pa = project(a, origin);
    const PlanarKm pb = project(b, origin);
    return std::hypot(pa.x - pb.x, pa.y - pb.y);
}

namespace {

// Fractional axial coordinates of a planar point.
void to_fractional_axial(const PlanarKm& xy, const GridSpec& spec, double& q, double& r) {
    const double s = spec.edge_km;
    if (spec.pointy_top) {
        q = (kSqrt3 / 3.0 * xy.x - 1.0 / 3.0 * xy.y) / s;
        r = (2.0 / 3.0 * xy.y) / s;
    } else {
        q = (2.0 / 3.0 * xy.x) / s;
        r = (-1.0 / 3.0 * xy.x + kSqrt3 / 3.0 * xy.y) / s;
    }
}

// Cube rounding: round each cube coordinate, then fix the one with the
// largest rounding error so q + r + s == 0 holds again.
HexCellId cube_round(double qf, double rf) {
    const double sf = -qf - rf;
    double q = std::round(qf);
    double r = std::round(rf);
    double s = std::round(sf);
    const double dq = std::abs(q - qf);
    const double dr = std::abs(r - rf);
    const double ds = std::abs(s - sf);
    if (dq > dr && dq > ds) {
        q = -r - s;
    } else if (dr > ds) {
        r = -q - s;
    }
    return HexCellId{static_cast<std::int64_t>(q), static_cast<std::int64_t>(r)};
}

}  // namespace

HexCellId locate_planar(const PlanarKm& xy, const GridSpec& spec) {
    double qf, rf;
    to_fractional_axial(xy, spec, qf, rf);
    return cube_round(qf, rf);
}

HexCellId locate(const GeoPoint& p, const GridSpec& spec) {
    if (!is_finite(p)) throw InvalidInputError("locate: non-finite point");
    validate(spec);
    return locate_planar(project(p, spec.origin), spec);
}

PlanarKm center_planar(const HexCellId& c, const GridSpec& spec) {
    const double s = spec.edge_km;
    const double q = static_cast<double>(c.q);
    const double r = static_cast<double>(c.r);
    if (spec.pointy_top) {
        return PlanarKm{s * kSqrt3 * (q + r / 2.0), s * 1.5 * r};
    }
    return PlanarKm{s * 1.5 * q, s * kSqrt3 * (r + q / 2.0)};
}

GeoPoint center(const HexCellId& c, const GridSpec& spec) {
    validate(spec);
    return unproject(center_planar(c, spec), spec.origin);
}

std::array<HexCellId, 6> neighbors(const HexCellId& c) {
    return {HexCellId{c.q + 1, c.r},     HexCellId{c.q + 1, c.r - 1},
            HexCellId{c.q, c.r - 1},     HexCellId{c.q - 1, c.r},
            HexCellId{c.q - 1, c.r + 1}, HexCellId{c.q, c.r + 1}};
}

TimeSlot slot_of(double time_s, double interval_hours) {
    if (!(interval_hours > 0.0))
        throw InvalidInputError("slot_of: interval_hours must be positive");
    return TimeSlot{static_cast<std::int64_t>(std::floor(time_s / (interval_hours * 3600.0)))};
}

std::uint64_t DemandTable::total() const {
    std::uint64_t n = 0;
    for (const auto& [key, count] : entries) n += count;
    return n;
}

DemandTable aggregate(const std::vector<TimedPoint>& events, const GridSpec& spec,
                      double interval_hours) {
    validate(spec);
    if (!(interval_hours > 0.0)) throw InvalidInputError("aggregate: bad interval");
    DemandTable table;
    table.spec = spec;
    table.interval_hours = interval_hours;
    for (const auto& ev : events) {
        if (ev.time_s < 0.0) throw InvalidInputError("aggregate: event before dataset epoch");
        const HexCellId cell = locate(ev.point, spec);
        const TimeSlot slot = slot_of(ev.time_s, interval_hours);
        ++table.entries[CellSlotKey{cell, slot}];
    }
    return table;
}

void validate(const ClassThresholds& t) {
    if (t.t_mid == 0 || t.t_mid > t.t_high)
        throw ConfigError("class thresholds require 0 < t_mid <= t_high");
}

DemandClass classify(std::uint64_t count, const ClassThresholds& thresholds) {
    validate(thresholds);
    if (count < thresholds.t_mid) return DemandClass::Low;
    if (count < thresholds.t_high) return DemandClass::Mid;
    return DemandClass::High;
}

}  // namespace hexfed
