#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <unordered_map>
#include <vector>

#include "hexfed/common.hpp"

namespace hexfed {

struct GeoPoint {
    double lat = 0.0;  // degrees, [-90, 90]
    double lon = 0.0;  // degrees, [-180, 180]
};

bool is_finite(const GeoPoint& p);
void validate(const GeoPoint& p);

// Local planar coordinates in km, east/north of a projection origin.
struct PlanarKm {
    double x = 0.0;
    double y = 0.0;
};

// Equirectangular projection about an anchor point. Regions here are a few
// tens of km wide, so the flat-earth approximation is well inside the cell size.
PlanarKm project(const GeoPoint& p, const GeoPoint& origin);
GeoPoint unproject(const PlanarKm& xy, const GeoPoint& origin);
double planar_distance_km(const GeoPoint& a, const GeoPoint& b, const GeoPoint& origin);

struct GridSpec {
    GeoPoint origin;          // projection anchor; center of cell (0,0)
    double edge_km = 1.0;     // hexagon edge length
    bool pointy_top = true;
};

void validate(const GridSpec& spec);

// Axial (q, r) address of one hexagonal cell.
struct HexCellId {
    std::int64_t q = 0;
    std::int64_t r = 0;

    friend bool operator==(const HexCellId&, const HexCellId&) = default;
    friend auto operator<=>(const HexCellId&, const HexCellId&) = default;
};

struct HexCellIdHash {
    std::size_t operator()(const HexCellId& c) const {
        return splitmix64(static_cast<std::uint64_t>(c.q) * 0x9e3779b97f4a7c15ULL ^
                          static_cast<std::uint64_t>(c.r));
    }
};

// Nearest-center cell for a point (cube rounding of fractional axial coords).
HexCellId locate(const GeoPoint& p, const GridSpec& spec);
HexCellId locate_planar(const PlanarKm& xy, const GridSpec& spec);

GeoPoint center(const HexCellId& c, const GridSpec& spec);
PlanarKm center_planar(const HexCellId& c, const GridSpec& spec);

// The six edge-sharing cells, fixed order starting east and going CCW.
std::array<HexCellId, 6> neighbors(const HexCellId& c);

struct TimeSlot {
    std::int64_t index = 0;  // counted from dataset epoch

    friend bool operator==(const TimeSlot&, const TimeSlot&) = default;
    friend auto operator<=>(const TimeSlot&, const TimeSlot&) = default;
};

// Slot of a timestamp (seconds since epoch); half-open [start, start+interval).
TimeSlot slot_of(double time_s, double interval_hours);

struct TimedPoint {
    GeoPoint point;
    double time_s = 0.0;  // seconds since dataset epoch
};

struct CellSlotKey {
    HexCellId cell;
    TimeSlot slot;

    friend bool operator==(const CellSlotKey&, const CellSlotKey&) = default;
};

struct CellSlotKeyHash {
    std::size_t operator()(const CellSlotKey& k) const {
        return splitmix64(HexCellIdHash{}(k.cell) ^
                          static_cast<std::uint64_t>(k.slot.index) * 0xff51afd7ed558ccdULL);
    }
};

// Per-cell per-slot demand counts. Absent key means count zero.
struct DemandTable {
    GridSpec spec;
    double interval_hours = 1.0;
    std::unordered_map<CellSlotKey, std::uint64_t, CellSlotKeyHash> entries;

    std::uint64_t count(const HexCellId& cell, TimeSlot slot) const {
        auto it = entries.find(CellSlotKey{cell, slot});
        return it == entries.end() ? 0 : it->second;
    }
    std::uint64_t total() const;
};

// Bins every event into its (cell, slot). Events before the epoch are rejected.
DemandTable aggregate(const std::vector<TimedPoint>& events, const GridSpec& spec,
                      double interval_hours);

enum class DemandClass : int { Low = 0, Mid = 1, High = 2 };

inline constexpr int kNumClasses = 3;

struct ClassThresholds {
    std::uint64_t t_mid = 1;   // counts below are Low
    std::uint64_t t_high = 5;  // counts at or above are High
};

void validate(const ClassThresholds& t);

DemandClass classify(std::uint64_t count, const ClassThresholds& thresholds);

}  // namespace hexfed
