"""Two-stage deployment episodes: communicate while hovering, relocate on blockage.

Each slot either advances a pending movement (no downlink service, movement
power) or samples fresh channels, solves the per-slot beamforming problem,
accrues reward, and lets the policy trigger a relocation when the rate falls
below the per-user threshold.  Episodes end when the remaining energy cannot
pay for the next slot.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import agent as agent_mod
from .agent import Action, QuantileTable, StateCode, TransitionSample, encode_state
from .beamforming import (OptimizerConfig, optimize, received_powers, sum_rate)
from .channel import (ArrayGeometry, ChannelParams, EffectiveCsi, SceneGeometry,
                      effective_csi, sample_channels, sample_direct_channels)


@dataclass(frozen=True)
class SimConfig:
    """Physical and protocol parameters of one deployment scenario."""

    slot_duration: float = 0.1
    rate_threshold: float = 1e6          # per-user rate floor triggering relocation
    power_threshold: float | None = None  # state-encoding threshold; None = calibrate
    uav_speed: float = 10.0
    p_hover: float = 16.0
    p_move: float = 20.0
    p_reflect: float = 0.16
    initial_energy: float = 72000.0      # joules
    ue_count: int = 4
    bs_rows: int = 4
    bs_cols: int = 4
    ir_rows: int = 4
    ir_cols: int = 4
    carrier_frequency: float = 30e9
    bandwidth: float = 2e6
    noise_power: float = 1e-17
    p_max: float = 10.0
    min_altitude: float = 5.0
    max_altitude: float = 60.0
    arena_x: tuple[float, float] = (0.0, 40.0)
    arena_y: tuple[float, float] = (-20.0, 20.0)
    mobility_step_std: float = 0.5
    ue_init_mean: tuple[float, float] = (20.0, 0.0)
    ue_init_std: float = math.sqrt(8.0)
    initial_uav_position: tuple[float, float, float] = (10.0, 0.0, 25.0)
    static_ir_position: tuple[float, float, float] = (20.0, 10.0, 20.0)

    def __post_init__(self):
        positive = ("slot_duration", "uav_speed", "p_hover", "p_move", "p_reflect",
                    "bandwidth", "noise_power", "p_max", "carrier_frequency",
                    "mobility_step_std")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.rate_threshold < 0:
            raise ValueError("rate_threshold must be nonnegative")
        if self.initial_energy < 0:
            raise ValueError("initial_energy must be nonnegative")
        if self.ue_count < 1:
            raise ValueError("ue_count must be at least 1")
        if self.power_threshold is not None and self.power_threshold <= 0:
            raise ValueError("power_threshold must be positive when given")
        if not self.min_altitude < self.max_altitude:
            raise ValueError("altitude bounds must satisfy min < max")
        if not (self.arena_x[0] < self.arena_x[1] and self.arena_y[0] < self.arena_y[1]):
            raise ValueError("arena bounds must be increasing")

    @property
    def bs_array(self) -> ArrayGeometry:
        return ArrayGeometry(self.bs_rows, self.bs_cols, self.carrier_frequency)

    @property
    def ir_array(self) -> ArrayGeometry:
        return ArrayGeometry(self.ir_rows, self.ir_cols, self.carrier_frequency)

    def optimizer_config(self, outer_tolerance: float = 1e-6,
                         max_outer_iterations: int = 200,
                         multi_start: bool = True) -> OptimizerConfig:
        return OptimizerConfig(p_max=self.p_max, outer_tolerance=outer_tolerance,
                               max_outer_iterations=max_outer_iterations,
                               multi_start=multi_start)


@dataclass
class UavState:
    """Position, current speed, remaining energy, and any in-flight destination."""

    position: np.ndarray
    speed: float = 0.0
    energy: float = 0.0
    move_target: np.ndarray | None = None
    altitude_clamped: bool = False

    def moving(self) -> bool:
        return self.move_target is not None


@dataclass
class UePopulation:
    """Ground-plane user positions (K x 2, zero height) and their mobility stream."""

    positions: np.ndarray
    rng: np.random.Generator

    def points3d(self) -> np.ndarray:
        return np.hstack([self.positions, np.zeros((self.positions.shape[0], 1))])


@dataclass
class SlotRecord:
    """One slot of an episode log."""

    index: int
    position: tuple[float, float, float]
    speed: float
    moving: bool
    state: StateCode | None
    action: int | None
    rate: float
    reward: float
    los_flags: tuple[bool, ...] | None
    energy_cost: float


@dataclass
class EpisodeLog:
    """Per-slot records plus the energy account of one episode."""

    records: list[SlotRecord] = field(default_factory=list)
    initial_energy: float = 0.0
    energy_spent: float = 0.0

    @property
    def slots(self) -> int:
        return len(self.records)

    @property
    def residual_energy(self) -> float:
        return self.initial_energy - self.energy_spent

    def hovering_records(self) -> list[SlotRecord]:
        return [r for r in self.records if not r.moving]

    def los_fraction(self) -> float:
        """Fraction of hovering user-slots whose reflector link was unobstructed."""
        hits = total = 0
        for r in self.hovering_records():
            if r.los_flags is None:
                continue
            hits += sum(r.los_flags)
            total += len(r.los_flags)
        return hits / total if total else float("nan")

    def avg_rate(self) -> float:
        """Time-average downlink rate over hovering slots, bits/s."""
        rates = [r.rate for r in self.hovering_records()]
        return float(np.mean(rates)) if rates else 0.0

    def movement_share(self) -> float:
        moving = sum(1 for r in self.records if r.moving)
        return moving / self.slots if self.slots else 0.0

    def total_reward(self) -> float:
        return float(sum(r.reward for r in self.records))


def power_cost(speed: float, config: SimConfig) -> float:
    """Platform power draw in watts: hover + reflection when still, movement otherwise."""
    if speed < 0:
        raise ValueError("speed must be nonnegative")
    if speed == 0.0:
        return config.p_hover + config.p_reflect
    return config.p_move


def slot_reward(rate: float, speed: float, slot_duration: float) -> float:
    """Received data volume in bits: service accrues only while hovering."""
    if rate < 0:
        raise ValueError("rate must be nonnegative")
    return 0.0 if speed > 0.0 else rate * slot_duration


def initial_population(config: SimConfig, rng: np.random.Generator) -> UePopulation:
    pos = rng.normal(loc=config.ue_init_mean, scale=config.ue_init_std,
                     size=(config.ue_count, 2))
    pos[:, 0] = _reflect_into(pos[:, 0], *config.arena_x)
    pos[:, 1] = _reflect_into(pos[:, 1], *config.arena_y)
    return UePopulation(positions=pos, rng=rng)


def _reflect_into(x, lo, hi):
    """Fold coordinates back into [lo, hi] by mirror reflection at the walls."""
    width = hi - lo
    y = np.mod(np.asarray(x, dtype=float) - lo, 2.0 * width)
    y = np.where(y > width, 2.0 * width - y, y)
    return y + lo


def step_ue_mobility(pop: UePopulation, config: SimConfig) -> UePopulation:
    """One Gaussian random-walk step per user, reflected at the arena walls."""
    step = pop.rng.normal(0.0, config.mobility_step_std, size=pop.positions.shape)
    pos = pop.positions + step
    pos[:, 0] = _reflect_into(pos[:, 0], *config.arena_x)
    pos[:, 1] = _reflect_into(pos[:, 1], *config.arena_y)
    return UePopulation(positions=pos, rng=pop.rng)


def blockage_triggered(rate: float, config: SimConfig) -> bool:
    """True when the sum-rate falls strictly below ue_count * rate_threshold."""
    return rate < config.ue_count * config.rate_threshold


def apply_action(uav: UavState, action: Action, ue_positions, config: SimConfig) -> UavState:
    """Set the movement target for a one-meter repositioning action.

    Vertical moves clamp at the altitude bounds (flagged); a horizontal move
    toward an already-collocated user completes instantly (no target set).
    """
    pos = np.asarray(uav.position, dtype=float)
    clamped = False
    if action.is_ascend or action.is_descend:
        dz = 1.0 if action.is_ascend else -1.0
        target_z = pos[2] + dz
        lo, hi = config.min_altitude, config.max_altitude
        if target_z < lo:
            target_z, clamped = lo, True
        elif target_z > hi:
            target_z, clamped = hi, True
        target = np.array([pos[0], pos[1], target_z])
    else:
        k = action.target_ue
        ue = np.asarray(ue_positions)[k][:2]
        delta = ue - pos[:2]
        dist = float(np.hypot(*delta))
        if dist == 0.0:
            return replace(uav, move_target=None, altitude_clamped=False)
        step = min(1.0, dist)
        target = pos.copy()
        target[:2] = pos[:2] + step * delta / dist
    if np.allclose(target, pos):
        return replace(uav, move_target=None, altitude_clamped=clamped)
    return replace(uav, move_target=target, altitude_clamped=clamped)


def movement_slots(distance: float, config: SimConfig) -> int:
    """Slots needed to cover a distance at cruise speed."""
    if distance <= 0:
        return 0
    return int(math.ceil(distance / (config.uav_speed * config.slot_duration)))


class StaticPolicy:
    """Never relocates."""

    name = "static"

    def begin_episode(self, rng: np.random.Generator) -> None:
        pass

    def choose_action(self, state, los_flags, rng):
        return None

    def observe_slot(self, state, action, reward) -> None:
        pass


class NonLearningPolicy:
    """Moves one meter toward a uniformly random blocked user on every trigger."""

    name = "nonlearning"

    def begin_episode(self, rng: np.random.Generator) -> None:
        pass

    def choose_action(self, state, los_flags, rng):
        blocked = [k for k, los in enumerate(los_flags) if not los]
        if not blocked:
            blocked = list(range(len(los_flags)))
        k = blocked[int(rng.integers(0, len(blocked)))]
        return Action(2 + k)

    def observe_slot(self, state, action, reward) -> None:
        pass


class DrlPolicy:
    """Distributional-table policy; optionally trains on every observed slot.

    ``exploration`` is either a float or a callable of the global slot counter.
    During movement slots the last observed state is held; with ``train`` the
    pending (state, action) pair is refit each slot against its reward and the
    bootstrap value at the freshest state (greedy by default, the behavior
    action under ``sarsa``).
    """

    name = "drl"

    def __init__(self, table: QuantileTable, exploration=0.0, train: bool = False,
                 sarsa: bool = False):
        self.table = table
        self.exploration = exploration
        self.train = train
        self.sarsa = sarsa
        self.global_slot = 0
        self._held_state: StateCode | None = None
        self._pending: tuple[StateCode, Action] | None = None

    def begin_episode(self, rng: np.random.Generator) -> None:
        self._held_state = None
        self._pending = None

    def _epsilon(self) -> float:
        if callable(self.exploration):
            return float(self.exploration(self.global_slot))
        return float(self.exploration)

    def choose_action(self, state, los_flags, rng):
        return agent_mod.select_action(self.table, state, self._epsilon(), rng)

    def observe_slot(self, state, action, reward) -> None:
        self.global_slot += 1
        held = state if state is not None else self._held_state
        if held is None:
            return
        if self._pending is not None and self.train:
            prev_state, prev_action = self._pending
            if self.sarsa and action is not None:
                nxt = action
            else:
                nxt = agent_mod.greedy_action(self.table, held)
            sample = TransitionSample(prev_state, prev_action, reward, held, nxt)
            agent_mod.update(self.table, sample)
        if action is not None:
            self._pending = (held, action)
        self._held_state = held


def run_episode(config: SimConfig, scene: SceneGeometry, policy, rng_seed: int,
                channel_params: ChannelParams | None = None,
                initial_position=None,
                optimizer_config: OptimizerConfig | None = None) -> EpisodeLog:
    """Simulate one energy-limited episode under the given relocation policy."""
    if config.power_threshold is None:
        raise ValueError("power_threshold must be resolved before running episodes")
    params = channel_params or ChannelParams()
    opt_cfg = optimizer_config or config.optimizer_config()
    rng = np.random.default_rng(rng_seed)
    pop = initial_population(config, rng)
    start = config.initial_uav_position if initial_position is None else initial_position
    uav = UavState(position=np.asarray(start, dtype=float), energy=config.initial_energy)
    policy.begin_episode(rng)
    log = EpisodeLog(initial_energy=config.initial_energy)
    dt = config.slot_duration
    tau = config.power_threshold
    spent = 0.0
    t = 0
    while True:
        moving = uav.moving()
        cost = (config.p_move if moving else config.p_hover + config.p_reflect) * dt
        if config.initial_energy - spent < cost:
            break
        t += 1
        pop = step_ue_mobility(pop, config)
        if moving:
            delta = uav.move_target - uav.position
            dist = float(np.linalg.norm(delta))
            step = config.uav_speed * dt
            if dist <= step:
                uav.position = uav.move_target
                uav.move_target = None
                uav.speed = dist / dt
            else:
                uav.position = uav.position + (step / dist) * delta
                uav.speed = config.uav_speed
            rate, reward, state, flags, action = 0.0, 0.0, None, None, None
            policy.observe_slot(None, None, 0.0)
        else:
            uav.speed = 0.0
            real = sample_channels(scene, config.bs_array, config.ir_array,
                                   uav.position, pop.points3d(), rng, params)
            csi = effective_csi(real, config.noise_power, config.bandwidth)
            sol = optimize(csi, opt_cfg)
            rate = sol.sum_rate
            powers = received_powers(sol.precoding, sol.reflection, csi)
            state = encode_state(powers, tau)
            reward = slot_reward(rate, 0.0, dt)
            flags = tuple(bool(f) for f in real.los_flags)
            action = None
            if blockage_triggered(rate, config):
                action = policy.choose_action(state, flags, rng)
            policy.observe_slot(state, action, reward)
            if action is not None:
                uav = apply_action(uav, action, pop.positions, config)
        spent += cost
        uav.energy = config.initial_energy - spent
        log.records.append(SlotRecord(
            index=t,
            position=tuple(float(x) for x in uav.position),
            speed=float(uav.speed),
            moving=moving,
            state=state,
            action=None if action is None else action.ordinal,
            rate=float(rate),
            reward=float(reward),
            los_flags=flags,
            energy_cost=cost,
        ))
    log.energy_spent = spent
    return log


def baseline_static_ir(config: SimConfig, scene: SceneGeometry, rng_seed: int,
                       channel_params: ChannelParams | None = None,
                       optimizer_config: OptimizerConfig | None = None,
                       position=None) -> EpisodeLog:
    """Reflector pinned at the static mount position; never relocates."""
    where = config.static_ir_position if position is None else position
    return run_episode(config, scene, StaticPolicy(), rng_seed,
                       channel_params=channel_params, initial_position=where,
                       optimizer_config=optimizer_config)


def baseline_nonlearning(config: SimConfig, scene: SceneGeometry, rng_seed: int,
                         channel_params: ChannelParams | None = None,
                         initial_position=None,
                         optimizer_config: OptimizerConfig | None = None) -> EpisodeLog:
    """Reactive relocation toward a random blocked user, no learning."""
    return run_episode(config, scene, NonLearningPolicy(), rng_seed,
                       channel_params=channel_params, initial_position=initial_position,
                       optimizer_config=optimizer_config)


def baseline_direct(config: SimConfig, scene: SceneGeometry, rng_seed: int,
                    channel_params: ChannelParams | None = None,
                    optimizer_config: OptimizerConfig | None = None) -> EpisodeLog:
    """Reflector-free transmission: precoding over the direct rows only.

    The same per-slot precoder optimization runs with the reflection fixed to
    the scalar identity; the energy clock of a hovering platform is kept so
    episode horizons stay comparable across baselines.
    """
    if config.power_threshold is None:
        raise ValueError("power_threshold must be resolved before running episodes")
    params = channel_params or ChannelParams()
    opt_cfg = optimizer_config or config.optimizer_config()
    rng = np.random.default_rng(rng_seed)
    pop = initial_population(config, rng)
    log = EpisodeLog(initial_energy=config.initial_energy)
    dt = config.slot_duration
    spent = 0.0
    t = 0
    cost = (config.p_hover + config.p_reflect) * dt
    while config.initial_energy - spent >= cost:
        t += 1
        pop = step_ue_mobility(pop, config)
        rows, flags = sample_direct_channels(scene, config.bs_array, pop.points3d(),
                                             rng, params)
        csi = EffectiveCsi(D=rows[:, None, :], noise_power=config.noise_power,
                           bandwidth=config.bandwidth)
        sol = optimize(csi, opt_cfg, optimize_reflection=False)
        rate = sol.sum_rate
        powers = received_powers(sol.precoding, sol.reflection, csi)
        state = encode_state(powers, config.power_threshold)
        spent += cost
        log.records.append(SlotRecord(
            index=t,
            position=tuple(float(x) for x in scene.bs_position),
            speed=0.0,
            moving=False,
            state=state,
            action=None,
            rate=float(rate),
            reward=slot_reward(rate, 0.0, dt),
            los_flags=tuple(bool(f) for f in flags),
            energy_cost=cost,
        ))
    log.energy_spent = spent
    return log
