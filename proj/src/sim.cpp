#include "sfdrive/sim.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace sfd::sim {

namespace {

constexpr double kPi = 3.14159265358979323846;

double norm_angle(double a) {
  while (a > kPi) a -= 2.0 * kPi;
  while (a <= -kPi) a += 2.0 * kPi;
  return a;
}

double vdist(const Vec2& a, const Vec2& b) {
  return std::hypot(a.x - b.x, a.y - b.y);
}

double vdot(const Vec2& a, const Vec2& b) { return a.x * b.x + a.y * b.y; }

// World point into the ego frame (x forward, y left).
Vec2 rel_to_ego(const EgoState& ego, const Vec2& p) {
  const double dx = p.x - ego.pos.x;
  const double dy = p.y - ego.pos.y;
  const double c = std::cos(ego.heading);
  const double s = std::sin(ego.heading);
  return {c * dx + s * dy, -s * dx + c * dy};
}

double clampd(double v, double lo, double hi) {
  return v < lo ? lo : (v > hi ? hi : v);
}

}  // namespace

const SimParams& params() {
  static const SimParams p;
  return p;
}

nlohmann::json params_json() {
  const SimParams& p = params();
  nlohmann::json j;
  j["dt"] = p.dt;
  j["v_max"] = p.v_max;
  j["v_cruise"] = p.v_cruise;
  j["v_turn"] = p.v_turn;
  j["a_max"] = p.a_max;
  j["k_speed"] = p.k_speed;
  j["max_yaw_rate"] = p.max_yaw_rate;
  j["sensor_range"] = p.sensor_range;
  j["max_steps"] = p.max_steps;
  j["collision_dist"] = p.collision_dist;
  j["offroute_dist"] = p.offroute_dist;
  j["offroute_secs"] = p.offroute_secs;
  j["offroute_abort"] = p.offroute_abort;
  j["goal_tol"] = p.goal_tol;
  j["junction_zone"] = p.junction_zone;
  j["junction_slow_zone"] = p.junction_slow_zone;
  j["stop_gap"] = p.stop_gap;
  j["coef_collision"] = p.coef_collision;
  j["coef_offroute"] = p.coef_offroute;
  j["coef_wrong_turn"] = p.coef_wrong_turn;
  j["wp_spacing_secs"] = p.wp_spacing_secs;
  j["n_waypoints"] = p.n_waypoints;
  j["n_route_samples"] = p.n_route_samples;
  j["sample_spacing"] = p.sample_spacing;
  j["n_event_slots"] = p.n_event_slots;
  j["occlusion_visible_steps"] = p.occlusion_visible_steps;
  j["occlusion_hidden_steps"] = p.occlusion_hidden_steps;
  return j;
}

const char* difficulty_name(Difficulty d) {
  return d == Difficulty::Easy ? "easy" : "hard";
}

Difficulty difficulty_from_name(const std::string& s) {
  if (s == "easy") return Difficulty::Easy;
  if (s == "hard") return Difficulty::Hard;
  SFD_FAIL("unknown difficulty: " << s << " (want easy|hard)");
}

const char* instruction_name(Instruction i) {
  switch (i) {
    case Instruction::Follow: return "follow";
    case Instruction::Left: return "left";
    case Instruction::Right: return "right";
    case Instruction::Straight: return "straight";
    case Instruction::CountLeft2: return "count_left_2";
    case Instruction::CountRight2: return "count_right_2";
    case Instruction::CountLeft3: return "count_left_3";
    case Instruction::CountRight3: return "count_right_3";
  }
  SFD_FAIL("unknown instruction id " << int(i));
}

bool Obstacle::visible_at(std::size_t step) const {
  if (!present_at(step)) return false;
  if (!occluded) return true;
  return step < reveal_step + params().occlusion_visible_steps;
}

const char* infraction_name(InfractionType t) {
  switch (t) {
    case InfractionType::Collision: return "collision";
    case InfractionType::OffRoute: return "off_route";
    case InfractionType::WrongTurn: return "wrong_turn";
  }
  SFD_FAIL("unknown infraction type");
}

const char* episode_end_name(EpisodeEnd e) {
  switch (e) {
    case EpisodeEnd::Goal: return "goal";
    case EpisodeEnd::Timeout: return "timeout";
    case EpisodeEnd::OffRouteAbort: return "off_route_abort";
  }
  SFD_FAIL("unknown episode end");
}

// ---- geometry --------------------------------------------------------------------------

Vec2 point_at(const Route& r, double s) {
  SFD_CHECK(r.centerline.size() >= 2, "route has no centerline");
  s = clampd(s, 0.0, r.length());
  auto it = std::upper_bound(r.arc.begin(), r.arc.end(), s);
  std::size_t i = std::size_t(it - r.arc.begin());
  if (i == 0) i = 1;
  if (i >= r.arc.size()) i = r.arc.size() - 1;
  const double seg = r.arc[i] - r.arc[i - 1];
  const double t = seg > 0 ? (s - r.arc[i - 1]) / seg : 0.0;
  const Vec2& a = r.centerline[i - 1];
  const Vec2& b = r.centerline[i];
  return {a.x + t * (b.x - a.x), a.y + t * (b.y - a.y)};
}

Vec2 direction_at(const Route& r, double s) {
  SFD_CHECK(r.centerline.size() >= 2, "route has no centerline");
  s = clampd(s, 0.0, r.length());
  auto it = std::upper_bound(r.arc.begin(), r.arc.end(), s);
  std::size_t i = std::size_t(it - r.arc.begin());
  if (i == 0) i = 1;
  if (i >= r.arc.size()) i = r.arc.size() - 1;
  const Vec2& a = r.centerline[i - 1];
  const Vec2& b = r.centerline[i];
  const double len = vdist(a, b);
  SFD_CHECK(len > 0, "degenerate centerline segment at index " << i);
  return {(b.x - a.x) / len, (b.y - a.y) / len};
}

Projection project(const Route& r, const Vec2& p, double s_hint) {
  SFD_CHECK(r.centerline.size() >= 2, "route has no centerline");
  const double lo = clampd(s_hint - 5.0, 0.0, r.length());
  const double hi = clampd(s_hint + 15.0, 0.0, r.length());
  std::size_t i0 = std::size_t(
      std::lower_bound(r.arc.begin(), r.arc.end(), lo) - r.arc.begin());
  std::size_t i1 = std::size_t(
      std::upper_bound(r.arc.begin(), r.arc.end(), hi) - r.arc.begin());
  if (i0 > 0) --i0;
  if (i1 >= r.arc.size()) i1 = r.arc.size() - 1;

  Projection best;
  best.dist = std::numeric_limits<double>::infinity();
  for (std::size_t i = i0; i < i1; ++i) {
    const Vec2& a = r.centerline[i];
    const Vec2& b = r.centerline[i + 1];
    const double segx = b.x - a.x, segy = b.y - a.y;
    const double seg2 = segx * segx + segy * segy;
    double t = seg2 > 0
                   ? ((p.x - a.x) * segx + (p.y - a.y) * segy) / seg2
                   : 0.0;
    t = clampd(t, 0.0, 1.0);
    const Vec2 q{a.x + t * segx, a.y + t * segy};
    const double d = vdist(p, q);
    if (d < best.dist) {
      best.dist = d;
      best.s = r.arc[i] + t * (r.arc[i + 1] - r.arc[i]);
    }
  }
  return best;
}

Instruction instruction_at(const Route& r, double s) {
  SFD_CHECK(!r.segments.empty(), "route has no instruction segments");
  for (const Segment& seg : r.segments)
    if (s >= seg.s0 && s < seg.s1) return seg.instr;
  return r.segments.back().instr;  // s == length lands here
}

// ---- generation ------------------------------------------------------------------------

namespace {

// Integer lattice direction: 0 +x, 1 +y, 2 -x, 3 -y.
Vec2 dir_vec(int d) {
  switch (d & 3) {
    case 0: return {1.0, 0.0};
    case 1: return {0.0, 1.0};
    case 2: return {-1.0, 0.0};
    default: return {0.0, -1.0};
  }
}

struct Builder {
  Route r;
  Vec2 cur{0.0, 0.0};
  int dir = 0;

  void start() {
    r.centerline.push_back(cur);
    r.arc.push_back(0.0);
  }
  // Appends `len` meters of straight centerline in the current direction.
  void leg(int len) {
    const Vec2 d = dir_vec(dir);
    for (int i = 0; i < len; ++i) {
      cur = {cur.x + d.x, cur.y + d.y};
      r.centerline.push_back(cur);
      r.arc.push_back(r.arc.back() + 1.0);
    }
  }
  // Records a junction at the current point. branch: 0 straight, 1 left,
  // 2 right; turning updates the build direction.
  void junction(int branch) {
    Junction j;
    j.pos = cur;
    j.arc = r.arc.back();
    j.approach = dir_vec(dir);
    j.instructed_branch = branch;
    r.junctions.push_back(j);
    if (branch == 1) dir = (dir + 1) & 3;
    if (branch == 2) dir = (dir + 3) & 3;
  }
};

// Expert-pace arrival estimate (in steps) at arc s_target, ignoring
// obstacles: used to schedule obstacle presence windows.
std::size_t estimate_arrival_steps(const Route& r, double s_target) {
  const SimParams& P = params();
  double v = 0.0, s = 0.0;
  std::size_t steps = 0;
  while (s < s_target && steps < 100000) {
    double vt = P.v_cruise;
    for (const Junction& j : r.junctions)
      if (j.instructed_branch != 0 && s > j.arc - P.junction_slow_zone &&
          s < j.arc + 3.0)
        vt = std::min(vt, P.v_turn);
    const double a = clampd(P.k_speed * (vt - v), -P.a_max, P.a_max);
    v = clampd(v + a * P.dt, 0.0, P.v_max);
    s += v * P.dt;
    ++steps;
  }
  return steps;
}

// Places one obstacle at integer arc `s_obs`; schedules its presence window
// around the expert's estimated arrival so the route stays completable.
void add_obstacle(Route& r, double s_obs, bool occluded) {
  const SimParams& P = params();
  Obstacle o;
  o.arc = s_obs;
  o.pos = point_at(r, s_obs);
  o.occluded = occluded;
  const std::size_t t_stop =
      estimate_arrival_steps(r, s_obs - P.stop_gap);
  if (occluded) {
    // Reveal while the ego approaches so the sighting overlaps the expert's
    // brake onset, hide through arrival, and clear shortly after: stopping
    // through the hidden window requires remembering the sighting.
    o.reveal_step = t_stop > 12 ? t_stop - 12 : 0;
    o.clear_step =
        o.reveal_step + P.occlusion_visible_steps + P.occlusion_hidden_steps;
  } else {
    o.reveal_step = 0;
    o.clear_step = t_stop + 20;
  }
  r.obstacles.push_back(o);
}

Instruction counting_instruction(int dir_branch, int nth) {
  if (nth == 2)
    return dir_branch == 1 ? Instruction::CountLeft2 : Instruction::CountRight2;
  return dir_branch == 1 ? Instruction::CountLeft3 : Instruction::CountRight3;
}

}  // namespace

Route generate_route(std::uint64_t seed, Difficulty difficulty) {
  Rng rng(0x5EEDF00Dull ^
          (seed * 2 + (difficulty == Difficulty::Hard ? 1 : 0)));
  Builder b;
  b.r.seed = seed;
  b.r.difficulty = difficulty;
  b.start();

  if (difficulty == Difficulty::Easy) {
    const double u = rng.uniform();
    if (u < 0.4) {
      // pure straight cruising
      b.leg(100 + int(rng.randint(41)));
      b.r.segments.push_back({0.0, b.r.length() + 1.0, Instruction::Follow});
    } else if (u < 0.7) {
      // one straight-through junction
      b.leg(50 + int(rng.randint(21)));
      const double sj = b.r.arc.back();
      b.junction(0);
      b.leg(50 + int(rng.randint(21)));
      b.r.segments.push_back({0.0, sj + 5.0, Instruction::Straight});
      b.r.segments.push_back({sj + 5.0, b.r.length() + 1.0,
                              Instruction::Follow});
    } else {
      // one direct-instruction turn
      const int branch = rng.uniform() < 0.5 ? 1 : 2;
      b.leg(50 + int(rng.randint(21)));
      const double sj = b.r.arc.back();
      b.junction(branch);
      b.leg(40 + int(rng.randint(21)));
      b.r.segments.push_back({0.0, sj + 5.0,
                              branch == 1 ? Instruction::Left
                                          : Instruction::Right});
      b.r.segments.push_back({sj + 5.0, b.r.length() + 1.0,
                              Instruction::Follow});
    }
    if (rng.uniform() < 0.6) {
      // plain obstacle on the first leg, clear of junction zones
      const double lim = b.r.junctions.empty()
                             ? b.r.length() - 12.0
                             : b.r.junctions.front().arc - 12.0;
      if (lim > 22.0) {
        const double s_obs = 20.0 + double(rng.randint(std::uint64_t(lim - 20.0)));
        add_obstacle(b.r, s_obs, false);
      }
    }
  } else {
    // hard: turn at the second of two junctions, plus one occluded obstacle.
    // The junction gap exceeds the sensor radius by more than the decision
    // zone, so at the turning junction no other junction is in the current
    // frame; the "one junction already behind me" evidence that resolves the
    // counting instruction exists only in the recent history.
    const int turn_branch = rng.uniform() < 0.5 ? 1 : 2;
    b.leg(30 + int(rng.randint(11)));
    const double j1 = b.r.arc.back();
    b.junction(0);
    b.leg(26 + int(rng.randint(3)));  // gap 26-28 m vs 15 m sensor range
    const double s_turn = b.r.arc.back();
    b.junction(turn_branch);
    b.leg(20 + int(rng.randint(11)));
    b.r.segments.push_back({0.0, s_turn + 5.0,
                            counting_instruction(turn_branch, 2)});
    b.r.segments.push_back({s_turn + 5.0, b.r.length() + 1.0,
                            Instruction::Follow});

    // occluded obstacle on the first leg, clear of the junction zone
    const double s_lo = 15.0, s_hi = j1 - 12.0;
    SFD_CHECK(s_hi > s_lo, "no room for the occluded obstacle (seed "
                               << seed << ")");
    const double s_obs =
        s_lo + double(rng.randint(std::uint64_t(s_hi - s_lo) + 1));
    add_obstacle(b.r, s_obs, true);
  }

  validate_route(b.r);
  return b.r;
}

void validate_route(const Route& r) {
  const SimParams& P = params();
  SFD_CHECK(r.centerline.size() >= 2 && r.centerline.size() == r.arc.size(),
            "centerline/arc size mismatch");
  SFD_CHECK(r.arc.front() == 0.0, "arc must start at 0");
  for (std::size_t i = 1; i < r.arc.size(); ++i)
    SFD_CHECK(r.arc[i] > r.arc[i - 1],
              "arc-length not strictly increasing at index " << i);
  SFD_CHECK(r.length() > 0, "route length must be positive");

  SFD_CHECK(!r.segments.empty(), "route needs instruction segments");
  SFD_CHECK(r.segments.front().s0 == 0.0, "first segment must start at 0");
  for (std::size_t i = 0; i < r.segments.size(); ++i) {
    SFD_CHECK(r.segments[i].s1 > r.segments[i].s0,
              "empty instruction segment " << i);
    if (i > 0)
      SFD_CHECK(r.segments[i].s0 == r.segments[i - 1].s1,
                "instruction segments must tile the route (gap at " << i
                                                                    << ")");
  }
  SFD_CHECK(r.segments.back().s1 >= r.length(),
            "instruction segments must cover the whole route");

  double prev = -1.0;
  for (const Junction& j : r.junctions) {
    SFD_CHECK(j.arc > prev, "junctions must be sorted by arc");
    prev = j.arc;
    SFD_CHECK(j.arc > 0 && j.arc < r.length(), "junction outside the route");
    SFD_CHECK(std::abs(vdot(j.approach, j.approach) - 1.0) < 1e-9,
              "junction approach must be a unit vector");
    SFD_CHECK(j.instructed_branch >= 0 && j.instructed_branch <= 2,
              "bad instructed branch");
  }
  for (const Obstacle& o : r.obstacles) {
    SFD_CHECK(o.arc > 0 && o.arc < r.length(), "obstacle outside the route");
    SFD_CHECK(o.clear_step > o.reveal_step, "empty obstacle presence window");
    const Vec2 q = point_at(r, o.arc);
    SFD_CHECK(vdist(q, o.pos) < 1e-6, "obstacle position/arc mismatch");
    for (const Junction& j : r.junctions)
      SFD_CHECK(std::abs(o.arc - j.arc) >= 8.0,
                "obstacle too close to a junction");
    if (o.occluded) {
      const std::size_t hidden = o.clear_step - o.reveal_step -
                                 P.occlusion_visible_steps;
      SFD_CHECK(hidden >= 3,
                "occlusion window must span >= 3 frames, got " << hidden);
      SFD_CHECK(hidden <= P.occlusion_hidden_steps + 6,
                "occlusion hidden span out of contract: " << hidden);
    }
  }

  bool has_counting = false;
  for (const Segment& s : r.segments)
    if (s.instr == Instruction::CountLeft2 ||
        s.instr == Instruction::CountRight2 ||
        s.instr == Instruction::CountLeft3 ||
        s.instr == Instruction::CountRight3)
      has_counting = true;
  if (r.difficulty == Difficulty::Easy) {
    SFD_CHECK(!has_counting, "easy routes must not carry counting instructions");
    SFD_CHECK(r.junctions.size() <= 1, "easy routes have at most one junction");
    for (const Obstacle& o : r.obstacles)
      SFD_CHECK(!o.occluded, "easy routes must not hide obstacles");
  } else {
    SFD_CHECK(r.junctions.size() >= 2, "hard routes need >= 2 junctions");
    SFD_CHECK(has_counting, "hard routes need a counting instruction");
    bool occ = false;
    for (const Obstacle& o : r.obstacles) occ = occ || o.occluded;
    SFD_CHECK(occ, "hard routes need an occluded obstacle");
  }
}

InfoGapPair make_info_gap_pair() {
  // Two hand-built hard routes sharing the junction at (40, 0) with an
  // identical straight approach. In A it is the first of two junctions
  // (straight through); in B it is the second (turn left). An ego at
  // (32, 0) sees bitwise-identical observations: the route samples clamp at
  // the junction, events and instruction match, and nothing else is in
  // sensor range.
  InfoGapPair out;

  {
    Builder a;
    a.r.seed = 1001;
    a.r.difficulty = Difficulty::Hard;
    a.start();
    a.leg(40);
    a.junction(0);  // (40, 0): A's first junction
    a.leg(40);
    a.junction(1);  // (80, 0): turn left, A's second junction
    a.leg(30);      // up to (80, 30)
    a.r.segments.push_back({0.0, 85.0, Instruction::CountLeft2});
    a.r.segments.push_back({85.0, a.r.length() + 1.0, Instruction::Follow});
    add_obstacle(a.r, 98.0, true);  // on the final leg at (80, 18)
    validate_route(a.r);
    out.a = a.r;
  }
  {
    Builder bld;
    bld.r.seed = 1002;
    bld.r.difficulty = Difficulty::Hard;
    bld.cur = {-20.0, 0.0};
    bld.start();
    bld.leg(30);
    bld.junction(0);  // (10, 0): B's first junction
    bld.leg(30);
    bld.junction(1);  // (40, 0): turn left, B's second junction
    bld.leg(30);      // up to (40, 30)
    bld.r.segments.push_back({0.0, 65.0, Instruction::CountLeft2});
    bld.r.segments.push_back({65.0, bld.r.length() + 1.0,
                              Instruction::Follow});
    add_obstacle(bld.r, 78.0, true);  // on the final leg at (40, 18)
    validate_route(bld.r);
    out.b = bld.r;
  }

  out.ego.pos = {32.0, 0.0};
  out.ego.heading = 0.0;
  out.ego.speed = 6.0;
  out.ego.step = 55;
  return out;
}

// ---- observation -----------------------------------------------------------------------

std::size_t observation_dim() {
  const SimParams& P = params();
  return 2 * P.n_route_samples + 4 * P.n_event_slots + kNumInstructions + 1;
}

Tensor build_observation(const Route& r, const EgoState& ego,
                         double progress) {
  const SimParams& P = params();
  std::vector<double> v;
  v.reserve(observation_dim());

  // Route samples, clamped at the next unpassed junction so the observation
  // never leaks which branch the route takes there.
  double clamp_arc = r.length();
  for (const Junction& j : r.junctions)
    if (j.arc > progress) {
      clamp_arc = std::min(clamp_arc, j.arc);
      break;
    }
  for (std::size_t i = 1; i <= P.n_route_samples; ++i) {
    const double si =
        std::min(progress + double(i) * P.sample_spacing, clamp_arc);
    const Vec2 rel = rel_to_ego(ego, point_at(r, si));
    v.push_back(rel.x);
    v.push_back(rel.y);
  }

  // Nearest visible events within sensor range.
  struct Evt {
    double d;
    double type;  // 1 junction, 2 obstacle
    Vec2 p;
  };
  std::vector<Evt> evts;
  for (const Junction& j : r.junctions) {
    const double d = vdist(ego.pos, j.pos);
    if (d <= P.sensor_range) evts.push_back({d, 1.0, j.pos});
  }
  for (const Obstacle& o : r.obstacles) {
    if (!o.visible_at(ego.step)) continue;
    const double d = vdist(ego.pos, o.pos);
    if (d <= P.sensor_range) evts.push_back({d, 2.0, o.pos});
  }
  std::sort(evts.begin(), evts.end(), [](const Evt& a, const Evt& b) {
    if (a.d != b.d) return a.d < b.d;
    if (a.type != b.type) return a.type < b.type;
    if (a.p.x != b.p.x) return a.p.x < b.p.x;
    return a.p.y < b.p.y;
  });
  for (std::size_t k = 0; k < P.n_event_slots; ++k) {
    if (k < evts.size()) {
      const Vec2 rel = rel_to_ego(ego, evts[k].p);
      v.push_back(1.0);
      v.push_back(rel.x);
      v.push_back(rel.y);
      v.push_back(evts[k].type);
    } else {
      v.push_back(0.0);
      v.push_back(0.0);
      v.push_back(0.0);
      v.push_back(0.0);
    }
  }

  // Instruction one-hot + normalized speed.
  const int instr = int(instruction_at(r, progress));
  for (std::size_t i = 0; i < kNumInstructions; ++i)
    v.push_back(i == std::size_t(instr) ? 1.0 : 0.0);
  v.push_back(ego.speed / P.v_max);

  return Tensor::from({v.size()}, v);
}

// ---- expert ----------------------------------------------------------------------------

fast::Waypoints expert_waypoints(const Route& r, const EgoState& ego,
                                 double progress) {
  const SimParams& P = params();
  const Projection proj = project(r, ego.pos, progress);
  SFD_CHECK(proj.dist <= P.offroute_abort,
            "expert oracle: ego " << proj.dist
                                  << " m off the centerline (limit "
                                  << P.offroute_abort << ")");

  // Target speed at arc s given the current step's obstacle presence.
  auto v_target = [&](double s) {
    double vt = P.v_cruise;
    for (const Junction& j : r.junctions)
      if (j.instructed_branch != 0 && s > j.arc - P.junction_slow_zone &&
          s < j.arc + 3.0)
        vt = std::min(vt, P.v_turn);
    // Aim the stop at the route end itself: the goal fires goal_tol early,
    // while the ego still moves fast enough to clear the follower's latch.
    double rem = r.length() - s;
    if (rem < 0) rem = 0;
    vt = std::min(vt, std::sqrt(2.0 * P.a_max * rem));
    for (const Obstacle& o : r.obstacles) {
      if (!o.present_at(ego.step)) continue;
      const double s_stop = o.arc - P.stop_gap;
      if (s < s_stop)
        vt = std::min(vt, std::sqrt(2.0 * P.a_max * (s_stop - s)));
      else if (s < o.arc + 1.0)
        vt = 0.0;  // inside the hold zone: wait for the obstacle to clear
    }
    return vt;
  };

  const std::size_t sub = std::size_t(P.wp_spacing_secs / P.dt + 0.5);
  double v = ego.speed, s = proj.s;
  std::vector<double> flat;
  flat.reserve(P.n_waypoints * 2);
  for (std::size_t i = 0; i < P.n_waypoints; ++i) {
    for (std::size_t k = 0; k < sub; ++k) {
      const double vt = v_target(s);
      const double a = clampd(P.k_speed * (vt - v), -P.a_max, P.a_max);
      v = clampd(v + a * P.dt, 0.0, P.v_max);
      s = std::min(s + v * P.dt, r.length());
    }
    const Vec2 rel = rel_to_ego(ego, point_at(r, s));
    flat.push_back(rel.x);
    flat.push_back(rel.y);
  }
  fast::Waypoints wp;
  wp.pts = Tensor::from({P.n_waypoints, 2}, flat);
  return wp;
}

// ---- dynamics --------------------------------------------------------------------------

EgoState step_dynamics(const EgoState& ego, const fast::Waypoints& wp) {
  const SimParams& P = params();
  SFD_CHECK(wp.count() >= 2,
            "follower needs at least two waypoints, got " << wp.count());
  for (std::size_t i = 0; i < 2; ++i) {
    SFD_CHECK(std::isfinite(wp.x(i)) && std::isfinite(wp.y(i)),
              "non-finite waypoint " << i);
  }

  const double dx = wp.x(1) - wp.x(0);
  const double dy = wp.y(1) - wp.y(0);
  double v_cmd = std::hypot(dx, dy) / P.wp_spacing_secs;
  // Stop latch: commands below walking pace brake to a full stop, so a
  // stop request survives small regression noise in the waypoint spacing.
  if (v_cmd < 0.75) v_cmd = 0.0;
  const double a = clampd(P.k_speed * (v_cmd - ego.speed), -P.a_max, P.a_max);
  const double v = clampd(ego.speed + a * P.dt, 0.0, P.v_max);

  // Pure pursuit toward the second waypoint (about one second ahead).
  const double tx = wp.x(1), ty = wp.y(1);
  const double L = std::hypot(tx, ty);
  double omega = 0.0;
  if (L > 0.3 && v > 0.05)
    omega = clampd(v * (2.0 * ty / (L * L)), -P.max_yaw_rate, P.max_yaw_rate);

  EgoState out;
  out.heading = norm_angle(ego.heading + omega * P.dt);
  out.speed = v;
  out.pos = {ego.pos.x + v * P.dt * std::cos(out.heading),
             ego.pos.y + v * P.dt * std::sin(out.heading)};
  out.step = ego.step + 1;
  return out;
}

// ---- infractions -----------------------------------------------------------------------

InfractionDetector::InfractionDetector(const Route& r)
    : route_(&r),
      collided_(r.obstacles.size(), false),
      junction_done_(r.junctions.size(), false),
      junction_inside_(r.junctions.size(), false) {}

void InfractionDetector::observe(const EgoState& ego) {
  const SimParams& P = params();
  const Route& r = *route_;
  const Projection proj = project(r, ego.pos, hint_);
  hint_ = proj.s;

  // Off-route: sustained lateral exceedance, one event per excursion.
  if (proj.dist > P.offroute_dist) {
    ++offroute_run_;
    if (offroute_armed_ &&
        offroute_run_ > std::size_t(P.offroute_secs / P.dt + 0.5)) {
      events_.push_back({InfractionType::OffRoute, ego.step, 0});
      offroute_armed_ = false;
    }
  } else {
    offroute_run_ = 0;
    offroute_armed_ = true;
  }

  // Collision: once per obstacle.
  for (std::size_t i = 0; i < r.obstacles.size(); ++i) {
    const Obstacle& o = r.obstacles[i];
    if (collided_[i] || !o.present_at(ego.step)) continue;
    if (vdist(ego.pos, o.pos) < P.collision_dist) {
      collided_[i] = true;
      events_.push_back({InfractionType::Collision, ego.step, i});
    }
  }

  // Wrong turn: classify the exit direction from each junction zone against
  // the branch directions; backing out is not a decision.
  for (std::size_t i = 0; i < r.junctions.size(); ++i) {
    if (junction_done_[i]) continue;
    const Junction& j = r.junctions[i];
    const double d = vdist(ego.pos, j.pos);
    if (junction_inside_[i] && d > P.junction_zone) {
      junction_inside_[i] = false;
      const Vec2 u{(ego.pos.x - j.pos.x) / d, (ego.pos.y - j.pos.y) / d};
      const Vec2 fwd = j.approach;
      const Vec2 left{-fwd.y, fwd.x};
      const Vec2 right{fwd.y, -fwd.x};
      const Vec2 back{-fwd.x, -fwd.y};
      const double df = vdot(u, fwd), dl = vdot(u, left), dr = vdot(u, right),
                   db = vdot(u, back);
      if (db >= df && db >= dl && db >= dr) continue;
      int branch = 0;
      if (dl > df && dl >= dr) branch = 1;
      if (dr > df && dr > dl) branch = 2;
      junction_done_[i] = true;
      if (branch != j.instructed_branch)
        events_.push_back({InfractionType::WrongTurn, ego.step, i});
    } else if (d <= P.junction_zone) {
      junction_inside_[i] = true;
    }
  }
}

// ---- scoring ---------------------------------------------------------------------------

RouteMetrics score(const Route& r, double max_progress, bool reached_goal,
                   const std::vector<Infraction>& events) {
  const SimParams& P = params();
  RouteMetrics m;
  m.rc = reached_goal ? 1.0 : clampd(max_progress / r.length(), 0.0, 1.0);
  m.is_score = 1.0;
  for (const Infraction& e : events) {
    switch (e.type) {
      case InfractionType::Collision: m.is_score *= P.coef_collision; break;
      case InfractionType::OffRoute: m.is_score *= P.coef_offroute; break;
      case InfractionType::WrongTurn: m.is_score *= P.coef_wrong_turn; break;
    }
    m.infractions[infraction_name(e.type)] += 1;
  }
  m.ds = m.rc * m.is_score;
  return m;
}

// ---- closed loop -----------------------------------------------------------------------

EpisodeResult run_episode(const Route& r, const ControlFn& fn,
                          std::size_t step_cap) {
  const SimParams& P = params();
  const std::size_t cap = step_cap == 0 ? P.max_steps : step_cap;

  EgoState ego;
  ego.pos = r.centerline.front();
  const Vec2 d0 = direction_at(r, 0.0);
  ego.heading = std::atan2(d0.y, d0.x);

  InfractionDetector det(r);
  EpisodeResult res;
  double hint = 0.0, s_max = 0.0;
  res.end = EpisodeEnd::Timeout;

  for (std::size_t t = 0; t < cap; ++t) {
    const Projection proj = project(r, ego.pos, hint);
    hint = proj.s;
    if (proj.dist > P.offroute_abort) {
      res.end = EpisodeEnd::OffRouteAbort;
      break;
    }
    s_max = std::max(s_max, proj.s);
    if (s_max >= r.length() - P.goal_tol) {
      res.end = EpisodeEnd::Goal;
      break;
    }

    const Instruction instr = instruction_at(r, proj.s);
    const Tensor obs = build_observation(r, ego, proj.s);
    const ControlOut ctl = fn({obs, instr, ego, proj.s, t});

    StepRecord rec;
    rec.step = t;
    rec.pos = ego.pos;
    rec.heading = ego.heading;
    rec.speed = ego.speed;
    rec.progress = proj.s;
    rec.instr = instr;
    rec.activated = ctl.activated;
    rec.theta = ctl.theta;
    res.trace.push_back(rec);

    ego = step_dynamics(ego, ctl.wp);
    det.observe(ego);
  }

  res.steps = res.trace.size();
  res.infractions = det.events();
  res.metrics =
      score(r, s_max, res.end == EpisodeEnd::Goal, res.infractions);
  return res;
}

EpisodeResult run_expert_episode(const Route& r, std::size_t step_cap) {
  return run_episode(
      r,
      [&r](const StepInputs& in) {
        ControlOut out;
        out.wp = expert_waypoints(r, in.ego, in.progress);
        return out;
      },
      step_cap);
}

std::vector<std::string> episode_log_lines(const Route& r,
                                           const EpisodeResult& res) {
  std::vector<std::string> lines;
  lines.reserve(res.trace.size() + 1);
  for (const StepRecord& s : res.trace) {
    nlohmann::json j;
    j["t"] = s.step;
    j["x"] = s.pos.x;
    j["y"] = s.pos.y;
    j["heading"] = s.heading;
    j["speed"] = s.speed;
    j["progress"] = s.progress;
    j["instr"] = instruction_name(s.instr);
    j["activated"] = s.activated;
    j["theta"] = s.theta;
    lines.push_back(j.dump());
  }
  nlohmann::json sum;
  sum["route_seed"] = r.seed;
  sum["difficulty"] = difficulty_name(r.difficulty);
  sum["end"] = episode_end_name(res.end);
  sum["steps"] = res.steps;
  sum["rc"] = res.metrics.rc;
  sum["is"] = res.metrics.is_score;
  sum["ds"] = res.metrics.ds;
  sum["infractions"] = res.metrics.infractions;
  lines.push_back(sum.dump());
  return lines;
}

// ---- serialization ---------------------------------------------------------------------

nlohmann::json route_to_json(const Route& r) {
  nlohmann::json j;
  j["seed"] = r.seed;
  j["difficulty"] = difficulty_name(r.difficulty);
  nlohmann::json pts = nlohmann::json::array();
  for (const Vec2& p : r.centerline) pts.push_back({p.x, p.y});
  j["centerline"] = std::move(pts);
  j["arc"] = r.arc;
  nlohmann::json segs = nlohmann::json::array();
  for (const Segment& s : r.segments)
    segs.push_back({{"s0", s.s0},
                    {"s1", s.s1},
                    {"instr", instruction_name(s.instr)},
                    {"instr_id", int(s.instr)}});
  j["segments"] = std::move(segs);
  nlohmann::json js = nlohmann::json::array();
  for (const Junction& q : r.junctions)
    js.push_back({{"x", q.pos.x},
                  {"y", q.pos.y},
                  {"arc", q.arc},
                  {"ax", q.approach.x},
                  {"ay", q.approach.y},
                  {"branch", q.instructed_branch}});
  j["junctions"] = std::move(js);
  nlohmann::json obs = nlohmann::json::array();
  for (const Obstacle& o : r.obstacles)
    obs.push_back({{"x", o.pos.x},
                   {"y", o.pos.y},
                   {"arc", o.arc},
                   {"occluded", o.occluded},
                   {"reveal", o.reveal_step},
                   {"clear", o.clear_step}});
  j["obstacles"] = std::move(obs);
  return j;
}

Route route_from_json(const nlohmann::json& j) {
  Route r;
  r.seed = j.at("seed").get<std::uint64_t>();
  r.difficulty = difficulty_from_name(j.at("difficulty").get<std::string>());
  for (const auto& p : j.at("centerline"))
    r.centerline.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
  r.arc = j.at("arc").get<std::vector<double>>();
  for (const auto& s : j.at("segments")) {
    Segment seg;
    seg.s0 = s.at("s0").get<double>();
    seg.s1 = s.at("s1").get<double>();
    seg.instr = Instruction(s.at("instr_id").get<int>());
    r.segments.push_back(seg);
  }
  for (const auto& q : j.at("junctions")) {
    Junction jn;
    jn.pos = {q.at("x").get<double>(), q.at("y").get<double>()};
    jn.arc = q.at("arc").get<double>();
    jn.approach = {q.at("ax").get<double>(), q.at("ay").get<double>()};
    jn.instructed_branch = q.at("branch").get<int>();
    r.junctions.push_back(jn);
  }
  for (const auto& q : j.at("obstacles")) {
    Obstacle o;
    o.pos = {q.at("x").get<double>(), q.at("y").get<double>()};
    o.arc = q.at("arc").get<double>();
    o.occluded = q.at("occluded").get<bool>();
    o.reveal_step = q.at("reveal").get<std::size_t>();
    o.clear_step = q.at("clear").get<std::size_t>();
    r.obstacles.push_back(o);
  }
  validate_route(r);
  return r;
}

void save_routes(const std::string& path, const std::vector<Route>& routes) {
  nlohmann::json j;
  j["sim_params"] = params_json();
  nlohmann::json arr = nlohmann::json::array();
  for (const Route& r : routes) arr.push_back(route_to_json(r));
  j["routes"] = std::move(arr);
  std::ofstream os(path, std::ios::trunc);
  SFD_CHECK(os.good(), "cannot open route file for writing: " << path);
  os << j.dump(1) << "\n";
  SFD_CHECK(os.good(), "write failure on route file: " << path);
}

std::vector<Route> load_routes(const std::string& path) {
  std::ifstream is(path);
  SFD_CHECK(is.good(), "cannot open route file: " << path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const std::exception& e) {
    SFD_FAIL("route file " << path << " is not valid JSON: " << e.what());
  }
  std::vector<Route> out;
  for (const auto& rj : j.at("routes")) out.push_back(route_from_json(rj));
  return out;
}

}  // namespace sfd::sim
