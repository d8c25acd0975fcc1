#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "sfdrive/fast_path.hpp"

// Deterministic 2D closed-loop driving world: seeded route generation with
// junctions, temporarily-present obstacles and occlusion windows, discrete
// navigation instructions (including counting instructions that are
// unresolvable from a single frame), an expert waypoint oracle, a pure-pursuit
// waypoint follower, infraction detection, and RC/IS/DS scoring.
namespace sfd::sim {

using ad::Tensor;

struct Vec2 {
  double x = 0.0, y = 0.0;
};

enum class Difficulty { Easy, Hard };
const char* difficulty_name(Difficulty d);
Difficulty difficulty_from_name(const std::string& s);

// Discrete navigation instruction vocabulary. Counting instructions ("turn at
// the n-th junction") are the memory challenge: the correct action at a
// junction depends on how many junctions were already passed, which no single
// observation reveals.
enum class Instruction : int {
  Follow = 0,
  Left = 1,
  Right = 2,
  Straight = 3,
  CountLeft2 = 4,
  CountRight2 = 5,
  CountLeft3 = 6,
  CountRight3 = 7,
};
inline constexpr std::size_t kNumInstructions = 8;
const char* instruction_name(Instruction i);

// All pinned world constants. Values are recorded into run manifests so every
// score is reproducible from artifacts alone.
struct SimParams {
  double dt = 0.1;                 // seconds per control step
  double v_max = 10.0;             // hard speed limit (m/s)
  double v_cruise = 6.0;           // expert target speed
  double v_turn = 3.0;             // expert cap near turning junctions
  double a_max = 3.0;              // |acceleration| limit (m/s^2)
  double k_speed = 4.0;            // proportional speed-control gain
  double max_yaw_rate = 1.5;       // rad/s
  double sensor_range = 15.0;      // event visibility radius (m)
  std::size_t max_steps = 600;     // episode timeout
  double collision_dist = 1.0;     // coefficient 0.65 under this distance
  double offroute_dist = 5.0;      // lateral bound (m)
  double offroute_secs = 1.0;      // sustained exceedance before the event
  double offroute_abort = 20.0;    // beyond this the episode aborts
  double goal_tol = 0.5;           // remaining meters that count as arrival
  double junction_zone = 6.0;      // wrong-turn decision radius
  double junction_slow_zone = 8.0; // expert slows this far before a turn
  double stop_gap = 2.0;           // expert stops this far before obstacles
  double coef_collision = 0.65;
  double coef_offroute = 0.7;
  double coef_wrong_turn = 0.7;
  double wp_spacing_secs = 0.5;    // waypoint temporal spacing
  std::size_t n_waypoints = 5;     // M
  std::size_t n_route_samples = 10;
  double sample_spacing = 2.0;     // meters between observed route samples
  std::size_t n_event_slots = 4;
  std::size_t occlusion_visible_steps = 5;
  // Hidden window (>= 3 frames by construction, <= 30 by design). 14 keeps
  // the stop point inside the window while short enough that a driver who
  // remembers the last sighting clears the hold before creeping into contact.
  std::size_t occlusion_hidden_steps = 14;
};
const SimParams& params();
nlohmann::json params_json();

// A junction on the centerline. The instructed branch is the one the route's
// centerline actually takes; the other two exist only as decoy directions for
// wrong-turn classification.
struct Junction {
  Vec2 pos;
  double arc = 0.0;           // centerline arc-length of the junction point
  Vec2 approach;              // unit direction entering the junction
  int instructed_branch = 0;  // 0 straight, 1 left, 2 right
};

// An obstacle sitting on the lane for a bounded step interval. Plain
// obstacles are observable whenever present; occluded ones are observable
// only during a short reveal window and must be remembered.
struct Obstacle {
  Vec2 pos;
  double arc = 0.0;
  bool occluded = false;
  std::size_t reveal_step = 0;  // first observable step
  std::size_t clear_step = 0;   // first step it is gone entirely
  bool present_at(std::size_t step) const {
    return step >= reveal_step && step < clear_step;
  }
  bool visible_at(std::size_t step) const;
};

struct Segment {
  double s0 = 0.0, s1 = 0.0;  // arc-length span [s0, s1)
  Instruction instr = Instruction::Follow;
};

struct Route {
  std::uint64_t seed = 0;
  Difficulty difficulty = Difficulty::Easy;
  std::vector<Vec2> centerline;  // ~1 m spacing, exact coordinates
  std::vector<double> arc;       // prefix arc-length per centerline point
  std::vector<Segment> segments;
  std::vector<Junction> junctions;
  std::vector<Obstacle> obstacles;

  double length() const { return arc.empty() ? 0.0 : arc.back(); }
};

struct EgoState {
  Vec2 pos;
  double heading = 0.0;  // radians, normalized to (-pi, pi]
  double speed = 0.0;    // m/s in [0, v_max]
  std::size_t step = 0;
};

// Windowed projection of a point onto the centerline near an arc hint.
struct Projection {
  double s = 0.0;     // arc-length of the closest centerline point
  double dist = 0.0;  // distance to it (lateral error)
};

// ---- route geometry -------------------------------------------------------------------

Vec2 point_at(const Route& r, double s);
Vec2 direction_at(const Route& r, double s);
Projection project(const Route& r, const Vec2& p, double s_hint);
Instruction instruction_at(const Route& r, double s);

// ---- generation -----------------------------------------------------------------------

Route generate_route(std::uint64_t seed, Difficulty difficulty);
// Structural invariants incl. the per-difficulty contracts; throws on breach.
void validate_route(const Route& r);

// The information-gap witness: two hard routes plus an ego state such that
// the observations at that state are bitwise identical while the expert
// waypoints differ (junction counting cannot be resolved from one frame).
struct InfoGapPair {
  Route a;  // the shared junction is this route's 1st -> go straight
  Route b;  // the same junction is this route's 2nd -> turn left
  EgoState ego;
};
InfoGapPair make_info_gap_pair();

// ---- observation ----------------------------------------------------------------------

std::size_t observation_dim();
// Fixed-length vector: 10 ego-relative route samples (clamped at the next
// unpassed junction so the chosen branch is not leaked), 4 nearest-event
// descriptors within sensor range (occluded obstacles omitted while hidden),
// instruction one-hot, normalized speed.
Tensor build_observation(const Route& r, const EgoState& ego, double progress);

// ---- expert + dynamics ----------------------------------------------------------------

// Ground-truth oracle: M points along the instruction-consistent centerline
// at 0.5 s spacing under the cruise/turn/stop speed profile, in the ego
// frame. Errors if the ego strays beyond 20 m of the centerline.
fast::Waypoints expert_waypoints(const Route& r, const EgoState& ego,
                                 double progress);

// Pure-pursuit steering toward the second waypoint, proportional speed
// control toward the implied waypoint speed, kinematic unicycle integration.
EgoState step_dynamics(const EgoState& ego, const fast::Waypoints& wp);

// ---- infractions + scoring --------------------------------------------------------------

enum class InfractionType { Collision, OffRoute, WrongTurn };
const char* infraction_name(InfractionType t);

struct Infraction {
  InfractionType type;
  std::size_t step = 0;
  std::size_t object_id = 0;  // obstacle or junction index
};

// Stateful per-episode detector with per-object debouncing.
class InfractionDetector {
 public:
  explicit InfractionDetector(const Route& r);
  void observe(const EgoState& ego);
  const std::vector<Infraction>& events() const { return events_; }

 private:
  const Route* route_;
  double hint_ = 0.0;
  std::size_t offroute_run_ = 0;
  bool offroute_armed_ = true;
  std::vector<bool> collided_;
  std::vector<bool> junction_done_;
  std::vector<bool> junction_inside_;
  std::vector<Infraction> events_;
};

struct RouteMetrics {
  double rc = 0.0;
  double is_score = 1.0;
  double ds = 0.0;
  std::map<std::string, int> infractions;
};

RouteMetrics score(const Route& r, double max_progress, bool reached_goal,
                   const std::vector<Infraction>& events);

// ---- closed loop ------------------------------------------------------------------------

enum class EpisodeEnd { Goal, Timeout, OffRouteAbort };
const char* episode_end_name(EpisodeEnd e);

struct StepInputs {
  const Tensor& obs;
  Instruction instr;
  const EgoState& ego;
  double progress;
  std::size_t step;
};

struct ControlOut {
  fast::Waypoints wp;
  bool activated = false;
  double theta = -1.0;
};

using ControlFn = std::function<ControlOut(const StepInputs&)>;

struct StepRecord {
  std::size_t step = 0;
  Vec2 pos;
  double heading = 0.0, speed = 0.0, progress = 0.0;
  Instruction instr = Instruction::Follow;
  bool activated = false;
  double theta = -1.0;
};

struct EpisodeResult {
  RouteMetrics metrics;
  EpisodeEnd end = EpisodeEnd::Timeout;
  std::size_t steps = 0;
  std::vector<Infraction> infractions;
  std::vector<StepRecord> trace;
};

// Runs the loop: project -> terminate? -> observe -> control -> integrate ->
// detect. step_cap == 0 means the standard timeout.
EpisodeResult run_episode(const Route& r, const ControlFn& fn,
                          std::size_t step_cap = 0);
EpisodeResult run_expert_episode(const Route& r, std::size_t step_cap = 0);

// Per-step JSON lines (positions, progress, gate trace) plus a summary line.
std::vector<std::string> episode_log_lines(const Route& r,
                                           const EpisodeResult& res);

// ---- route serialization -----------------------------------------------------------------

nlohmann::json route_to_json(const Route& r);
Route route_from_json(const nlohmann::json& j);
void save_routes(const std::string& path, const std::vector<Route>& routes);
std::vector<Route> load_routes(const std::string& path);

}  // namespace sfd::sim
