"""Simulated two-robot system and the range EKF that labels frames.

The filter estimates the peer's planar position and relative yaw in the
observer's horizontal frame from body-frame velocities, yaw rates,
heights, and the inter-robot range.  Height difference is measured
directly, so the emitted 3D label is (x_hat, y_hat, h_peer - h_self).

State [x, y, psi], continuous dynamics (Euler-stepped):
    x'   =  vjx cos(psi) - vjy sin(psi) - vix + ri * y
    y'   =  vjx sin(psi) + vjy cos(psi) - viy - ri * x
    psi' =  rj - ri
Range measurement: h(x) = sqrt(x^2 + y^2 + h_rel^2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .datagen import DatasetRecord
from .geometry import HorizontalCoord

# Filter tuning: assumed input/measurement noise levels.
VEL_NOISE = 0.05  # m/s
YAW_RATE_NOISE = 0.01  # rad/s
RANGE_NOISE = 0.1  # m
HEIGHT_NOISE = 0.02  # m
# Headroom factor on the assumed input noise; keeps the filter adaptive
# instead of collapsing onto a wrong linearization.
PROCESS_NOISE_SCALE = 3.0

INIT_MEAN = (1.0, 0.0, 0.0)
INIT_COV_DIAG = (4.0, 4.0, 1.0)


@dataclass
class EkfInputs:
    v_i: np.ndarray  # observer body-frame planar velocity (2,)
    v_j: np.ndarray  # peer body-frame planar velocity (2,)
    r_i: float  # observer yaw rate
    r_j: float  # peer yaw rate
    h_i: float  # observer height
    h_j: float  # peer height
    d_ij: float  # UWB range

    def __post_init__(self) -> None:
        vals = [*self.v_i, *self.v_j, self.r_i, self.r_j, self.h_i, self.h_j, self.d_ij]
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("non-finite EKF input")
        if self.d_ij < 0:
            raise ValueError("range must be non-negative")


@dataclass
class EkfState:
    mean: np.ndarray  # [x, y, psi]
    cov: np.ndarray  # 3x3

    @classmethod
    def initial(cls) -> "EkfState":
        return cls(
            mean=np.array(INIT_MEAN, dtype=float),
            cov=np.diag(INIT_COV_DIAG).astype(float),
        )


def _symmetrize(p: np.ndarray) -> np.ndarray:
    return 0.5 * (p + p.T)


def dynamics(mean: np.ndarray, inputs: EkfInputs) -> np.ndarray:
    x, y, psi = mean
    c, s = math.cos(psi), math.sin(psi)
    vjx, vjy = inputs.v_j
    vix, viy = inputs.v_i
    return np.array(
        [
            vjx * c - vjy * s - vix + inputs.r_i * y,
            vjx * s + vjy * c - viy - inputs.r_i * x,
            inputs.r_j - inputs.r_i,
        ]
    )


def dynamics_jacobian(mean: np.ndarray, inputs: EkfInputs) -> np.ndarray:
    _, _, psi = mean
    c, s = math.cos(psi), math.sin(psi)
    vjx, vjy = inputs.v_j
    return np.array(
        [
            [0.0, inputs.r_i, -vjx * s - vjy * c],
            [-inputs.r_i, 0.0, vjx * c - vjy * s],
            [0.0, 0.0, 0.0],
        ]
    )


def process_noise(dt: float) -> np.ndarray:
    """Per-step covariance inflation from the assumed input noise; both
    robots' velocity noise enters the planar rates, both yaw-rate noises
    enter the yaw rate."""
    qv = 2.0 * (PROCESS_NOISE_SCALE * VEL_NOISE) ** 2
    qr = 2.0 * (PROCESS_NOISE_SCALE * YAW_RATE_NOISE) ** 2
    return np.diag([qv, qv, qr]) * dt * dt


def ekf_predict(state: EkfState, inputs: EkfInputs, dt: float) -> EkfState:
    """Euler-step the mean and propagate covariance through the
    linearized dynamics."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    mean = state.mean + dt * dynamics(state.mean, inputs)
    f = np.eye(3) + dt * dynamics_jacobian(state.mean, inputs)
    cov = _symmetrize(f @ state.cov @ f.T + process_noise(dt))
    return EkfState(mean=mean, cov=cov)


def predicted_range(mean: np.ndarray, h_rel: float) -> float:
    x, y, _ = mean
    return math.sqrt(x * x + y * y + h_rel * h_rel)


def range_jacobian(mean: np.ndarray, h_rel: float) -> np.ndarray:
    r = predicted_range(mean, h_rel)
    return np.array([mean[0] / r, mean[1] / r, 0.0])


def ekf_update_range(
    state: EkfState,
    d_ij: float,
    h_rel: float,
    range_noise: float = RANGE_NOISE,
) -> tuple[EkfState, bool]:
    """Scalar-innovation range update (Joseph form).

    Returns (state, applied).  The update is skipped (applied=False)
    when the predicted range is ~0, where the measurement Jacobian is
    undefined.
    """
    if d_ij < 0:
        raise ValueError("range must be non-negative")
    if predicted_range(state.mean, h_rel) < 1e-9:
        return state, False
    h_vec = range_jacobian(state.mean, h_rel)
    r_var = range_noise**2
    s = float(h_vec @ state.cov @ h_vec) + r_var
    k = (state.cov @ h_vec) / s
    innovation = d_ij - predicted_range(state.mean, h_rel)
    mean = state.mean + k * innovation
    ikh = np.eye(3) - np.outer(k, h_vec)
    cov = ikh @ state.cov @ ikh.T + r_var * np.outer(k, k)
    return EkfState(mean=mean, cov=_symmetrize(cov)), True


class RangeEkfBank:
    """Bank of yaw hypotheses with likelihood pruning, plus recovery
    machinery for the labeling loop.

    Under range-only measurements the early yaw/position posterior is
    multimodal: a filter can settle on a wrong relative yaw while
    staying range-consistent, then dead-reckon the position away.  The
    bank starts one filter per yaw quadrant and prunes to the hypothesis
    with the best cumulative innovation likelihood.  Each update is
    Huber-weighted (large normalized innovations get an inflated
    measurement variance instead of full trust), and a filter whose
    smoothed normalized innovation stays inconsistent has its covariance
    re-inflated so it can re-acquire after a wrong lock.
    """

    YAW_HYPOTHESES = (0.0, math.pi / 2, -math.pi / 2, math.pi)
    PRUNE_AFTER_UPDATES = 100
    NIS_SMOOTHING = 0.2  # EWMA weight of the newest normalized innovation
    NIS_RECOVERY_THRESHOLD = 4.0
    RECOVERY_INFLATION = 100.0
    HUBER_SIGMAS = 3.0

    def __init__(self) -> None:
        self.states = [
            EkfState(mean=np.array([INIT_MEAN[0], INIT_MEAN[1], yaw]),
                     cov=np.diag(INIT_COV_DIAG).astype(float))
            for yaw in self.YAW_HYPOTHESES
        ]
        self.loglik = [0.0] * len(self.states)
        self.nis_ewma = [1.0] * len(self.states)
        self.updates = 0

    @property
    def best(self) -> EkfState:
        return self.states[int(np.argmax(self.loglik))]

    def predict(self, inputs: EkfInputs, dt: float) -> None:
        self.states = [ekf_predict(s, inputs, dt) for s in self.states]

    def update(self, d_ij: float, h_rel: float,
               range_noise: float = RANGE_NOISE) -> None:
        self.updates += 1
        r_var = range_noise**2
        new_states = []
        for i, state in enumerate(self.states):
            pred = predicted_range(state.mean, h_rel)
            h_vec = range_jacobian(state.mean, h_rel)
            hph = float(h_vec @ state.cov @ h_vec)
            innovation = d_ij - pred
            s = hph + r_var
            self.loglik[i] += -0.5 * (innovation**2 / s + math.log(s))
            self.nis_ewma[i] = (
                (1.0 - self.NIS_SMOOTHING) * self.nis_ewma[i]
                + self.NIS_SMOOTHING * innovation**2 / s
            )
            if self.nis_ewma[i] > self.NIS_RECOVERY_THRESHOLD:
                state = EkfState(
                    mean=state.mean,
                    cov=state.cov * self.RECOVERY_INFLATION + np.eye(3) * 1e-4,
                )
                self.nis_ewma[i] = 1.0
                hph = float(h_vec @ state.cov @ h_vec)
            effective_noise = range_noise
            ratio = abs(innovation) / (self.HUBER_SIGMAS * math.sqrt(hph + r_var))
            if ratio > 1.0:
                effective_noise = range_noise * ratio
            state, _ = ekf_update_range(state, d_ij, h_rel, effective_noise)
            new_states.append(state)
        self.states = new_states
        if self.updates == self.PRUNE_AFTER_UPDATES and len(self.states) > 1:
            keep = int(np.argmax(self.loglik))
            self.states = [self.states[keep]]
            self.loglik = [self.loglik[keep]]
            self.nis_ewma = [self.nis_ewma[keep]]


# --- simulation -------------------------------------------------------


@dataclass
class SimConfig:
    duration_s: float = 120.0
    dt: float = 0.02  # prediction step
    uwb_rate_hz: float = 10.0
    frame_rate_hz: float = 5.0
    settle_s: float = 0.0  # discard frames before this time
    seed: Optional[int] = None
    # injected measurement noise (zero means a noise-free run; the
    # filter keeps its own assumed levels either way)
    vel_noise: float = VEL_NOISE
    yaw_rate_noise: float = YAW_RATE_NOISE
    range_noise: float = RANGE_NOISE
    height_noise: float = HEIGHT_NOISE
    # relative-trajectory shaping
    depth_center: float = 2.0
    position_pull: float = 0.25  # mean-reversion gain toward the cone center

    def __post_init__(self) -> None:
        if self.dt <= 0 or self.duration_s <= 0:
            raise ValueError("dt and duration must be positive")
        if self.uwb_rate_hz <= 0 or self.frame_rate_hz <= 0:
            raise ValueError("rates must be positive")
        if min(self.vel_noise, self.yaw_rate_noise, self.range_noise, self.height_noise) < 0:
            raise ValueError("noise levels must be non-negative")


class _SineMix:
    """Smooth random scalar signal: sum of sinusoids."""

    def __init__(self, rng: np.random.Generator, n: int, amp: tuple[float, float],
                 omega: tuple[float, float]):
        self.amps = rng.uniform(*amp, size=n)
        self.omegas = rng.uniform(*omega, size=n)
        self.phases = rng.uniform(0.0, 2.0 * math.pi, size=n)

    def __call__(self, t: float) -> float:
        return float(np.sum(self.amps * np.sin(self.omegas * t + self.phases)))


@dataclass
class SimTrajectory:
    """Dense simulation record at the prediction rate."""

    times: np.ndarray  # (N,)
    true_rel: np.ndarray  # (N, 3): x, y, psi
    est_rel: np.ndarray  # (N, 3)
    true_h_rel: np.ndarray  # (N,)
    frame_steps: np.ndarray  # indices of emitted frames into the arrays

    def position_error(self) -> np.ndarray:
        return np.hypot(
            self.est_rel[:, 0] - self.true_rel[:, 0],
            self.est_rel[:, 1] - self.true_rel[:, 1],
        )


def simulate_and_label(
    config: SimConfig, rng: Optional[np.random.Generator] = None
) -> tuple[SimTrajectory, list[DatasetRecord], list[DatasetRecord]]:
    """Run the two-robot sim and the filter; emit per-frame records.

    Returns (trajectory, estimated labels, ground-truth labels).  Both
    record lists use the dataset labels.jsonl schema with image names
    images/%06d.png in frame order, so they can drive dataset rendering
    directly: render poses from the truth list, write the estimated
    list as labels.
    """
    if rng is None:
        if config.seed is None:
            raise ValueError("simulation requires a seed or an explicit rng")
        rng = np.random.Generator(np.random.PCG64(config.seed))

    # observer motion and attitude
    vi_x = _SineMix(rng, 2, (0.05, 0.25), (0.1, 0.8))
    vi_y = _SineMix(rng, 2, (0.05, 0.25), (0.1, 0.8))
    ri_sig = _SineMix(rng, 2, (0.02, 0.10), (0.05, 0.5))
    roll_sig = _SineMix(rng, 2, (0.02, 0.07), (0.2, 0.9))
    pitch_sig = _SineMix(rng, 2, (0.02, 0.07), (0.2, 0.9))
    # relative-path velocity field and yaw drift
    rel_vx = _SineMix(rng, 3, (0.05, 0.30), (0.1, 0.9))
    rel_vy = _SineMix(rng, 3, (0.05, 0.30), (0.1, 0.9))
    rel_wz = _SineMix(rng, 2, (0.02, 0.12), (0.05, 0.5))
    # heights
    hi_sig = _SineMix(rng, 1, (0.04, 0.08), (0.1, 0.5))
    hj_sig = _SineMix(rng, 1, (0.06, 0.12), (0.1, 0.5))

    n_steps = int(round(config.duration_s / config.dt))
    uwb_every = max(1, int(round(1.0 / (config.uwb_rate_hz * config.dt))))
    frame_every = max(1, int(round(1.0 / (config.frame_rate_hz * config.dt))))
    settle_steps = int(round(config.settle_s / config.dt))

    rel = np.array([config.depth_center, 0.0, 0.0])
    bank = RangeEkfBank()

    times = np.empty(n_steps)
    true_rel = np.empty((n_steps, 3))
    est_rel = np.empty((n_steps, 3))
    true_h_rel = np.empty(n_steps)
    frame_steps: list[int] = []
    labels: list[DatasetRecord] = []
    truth: list[DatasetRecord] = []

    for k in range(n_steps):
        t = k * config.dt
        x, y, psi = rel
        h_i = 1.0 + hi_sig(t)
        h_j = 1.0 + hj_sig(t)
        h_rel_true = h_j - h_i

        # true relative velocity: smooth drift plus pull toward the cone center
        rel_dot = np.array(
            [
                rel_vx(t) + config.position_pull * (config.depth_center - x),
                rel_vy(t) + config.position_pull * (0.0 - y),
                rel_wz(t) + 0.3 * (0.0 - psi),
            ]
        )
        v_i_true = np.array([vi_x(t), vi_y(t)])
        r_i_true = ri_sig(t)
        # solve the peer's body velocity that realizes rel_dot
        rhs = np.array(
            [
                rel_dot[0] + v_i_true[0] - r_i_true * y,
                rel_dot[1] + v_i_true[1] + r_i_true * x,
            ]
        )
        c, s = math.cos(psi), math.sin(psi)
        v_j_true = np.array([c * rhs[0] + s * rhs[1], -s * rhs[0] + c * rhs[1]])
        r_j_true = rel_dot[2] + r_i_true

        d_true = math.sqrt(x * x + y * y + h_rel_true * h_rel_true)

        inputs = EkfInputs(
            v_i=v_i_true + rng.normal(0.0, config.vel_noise, 2),
            v_j=v_j_true + rng.normal(0.0, config.vel_noise, 2),
            r_i=r_i_true + rng.normal(0.0, config.yaw_rate_noise),
            r_j=r_j_true + rng.normal(0.0, config.yaw_rate_noise),
            h_i=h_i + rng.normal(0.0, config.height_noise),
            h_j=h_j + rng.normal(0.0, config.height_noise),
            d_ij=max(0.0, d_true + rng.normal(0.0, config.range_noise)),
        )
        # measurement update at t_k, then record, then predict to t_k+1
        if k % uwb_every == 0:
            bank.update(inputs.d_ij, inputs.h_j - inputs.h_i)
        state = bank.best

        times[k] = t
        true_rel[k] = rel
        est_rel[k] = state.mean
        true_h_rel[k] = h_rel_true

        if k % frame_every == 0 and k >= settle_steps:
            name = f"images/{len(labels):06d}.png"
            att_roll, att_pitch = roll_sig(t), pitch_sig(t)
            labels.append(
                DatasetRecord(
                    image=name,
                    roll=att_roll,
                    pitch=att_pitch,
                    robots=[
                        HorizontalCoord(
                            float(state.mean[0]),
                            float(state.mean[1]),
                            float(inputs.h_j - inputs.h_i),
                        )
                    ],
                )
            )
            truth.append(
                DatasetRecord(
                    image=name,
                    roll=att_roll,
                    pitch=att_pitch,
                    robots=[HorizontalCoord(float(x), float(y), float(h_rel_true))],
                )
            )
            frame_steps.append(k)

        bank.predict(inputs, config.dt)
        # advance the truth with the same Euler step the filter assumes
        rel = rel + config.dt * rel_dot

    traj = SimTrajectory(
        times=times,
        true_rel=true_rel,
        est_rel=est_rel,
        true_h_rel=true_h_rel,
        frame_steps=np.array(frame_steps, dtype=int),
    )
    return traj, labels, truth
