"""Regime-switching jump-diffusion market model.

The traded asset follows, between regime switches of the semi-Markov chain
``X`` with age ``Y``,

    dS_t = S_{t-} ( mu(X_t) dt + sigma(t, X_t) dW_t + jump increments ),

where jumps arrive with a finite intensity measure ``nu`` on the mark space
and multiply the spot by ``1 + eta(z) > 0``.  The measure is reduced once to
a weighted node list (atoms, or a composite-Simpson discretization of a
density), and every downstream integral against ``nu`` is a plain weighted
sum over those nodes.

The minimal martingale measure enters through the scalar ratio

    J(t, i) = (r(i) - mu(i) - int eta dnu) / (sigma(t, i)^2 + int eta^2 dnu),

which shifts the Brownian drift by ``J sigma`` and tilts jump marks by
``Gamma = 1 + J eta``; admissibility requires ``Gamma > 0`` everywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .regimes import RateSpec, rate_spec_from_dict, simulate_regime_path

__all__ = [
    "EtaClamp",
    "EtaTable",
    "JumpSpec",
    "JumpIntegrals",
    "MarketModel",
    "EmmCoefficients",
    "NoArbitrageReport",
    "MvTradeoff",
    "PathRecord",
    "jump_integrals",
    "check_no_arbitrage",
    "mmm_coefficients",
    "simulate_asset_path",
    "radon_nikodym_path",
    "mv_tradeoff",
    "market_model_from_dict",
]

#: default node count for density-based jump measures
DEFAULT_JUMP_NODES = 201
#: default Simpson node count for time integrals of tabulated volatility
DEFAULT_TIME_NODES = 33


# ---------------------------------------------------------------------------
# Jump size functions
# ---------------------------------------------------------------------------


class EtaClamp:
    """Clamped linear jump size ``eta(z) = max(min(slope * z, hi), lo)``."""

    kind = "clamp"

    def __init__(self, slope: float, lo: float, hi: float):
        if not (lo > -1.0):
            raise ValueError("jump size lower clamp must exceed -1")
        if hi < lo or not all(map(math.isfinite, (slope, lo, hi))):
            raise ValueError("bad clamp parameters")
        self.slope = float(slope)
        self.lo = float(lo)
        self.hi = float(hi)

    def value(self, z):
        return np.clip(self.slope * np.asarray(z, dtype=float), self.lo, self.hi)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "slope": self.slope, "lo": self.lo, "hi": self.hi}


class EtaTable:
    """Tabulated jump size, linear between knots, constant beyond them."""

    kind = "table"

    def __init__(self, z, value):
        z = np.asarray(z, dtype=float)
        value = np.asarray(value, dtype=float)
        if z.ndim != 1 or z.size < 2 or z.shape != value.shape:
            raise ValueError("eta table needs matching 1-d knots and values")
        if np.any(np.diff(z) <= 0):
            raise ValueError("eta table knots must be increasing")
        if not np.all(value > -1.0):
            raise ValueError("jump sizes must stay above -1")
        self.z = z
        self.val = value

    def value(self, z):
        return np.interp(np.asarray(z, dtype=float), self.z, self.val)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "z": self.z.tolist(), "value": self.val.tolist()}


def _eta_from_dict(d: dict):
    kind = d.get("kind")
    if kind == "clamp":
        return EtaClamp(slope=d["slope"], lo=d["lo"], hi=d["hi"])
    if kind == "table":
        return EtaTable(z=d["z"], value=d["value"])
    raise ValueError(f"unknown eta kind {kind!r}")


# ---------------------------------------------------------------------------
# Jump measure
# ---------------------------------------------------------------------------


def _simpson_weights(a: float, b: float, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights of the composite Simpson rule with ``n`` odd nodes."""
    if n % 2 == 0:
        n += 1
    n = max(n, 3)
    z = np.linspace(a, b, n)
    h = (b - a) / (n - 1)
    w = np.full(n, 2.0)
    w[1::2] = 4.0
    w[0] = w[-1] = 1.0
    return z, w * h / 3.0


@dataclass(frozen=True)
class JumpIntegrals:
    """Node-sum moments of the jump measure."""

    int_eta: float
    int_eta_sq: float
    mass: float
    #: rate c with E[squared jump product over [0, t]] = exp(c * mass * t)
    quad_growth_rate: float


class JumpSpec:
    """Finite jump measure reduced to weighted nodes ``(z_m, w_m)``.

    Parameters
    ----------
    z, w : arrays
        Mark locations and nonnegative weights.  An empty pair is the
        jump-free degeneration.
    eta : EtaClamp or EtaTable
        Jump size as a function of the mark.
    """

    def __init__(self, z, w, eta):
        z = np.asarray(z, dtype=float)
        w = np.asarray(w, dtype=float)
        if z.shape != w.shape or z.ndim != 1:
            raise ValueError("jump nodes and weights must be matching 1-d arrays")
        if np.any(w < 0) or not (np.all(np.isfinite(z)) and np.all(np.isfinite(w))):
            raise ValueError("jump weights must be finite and nonnegative")
        self.z = z
        self.w = w
        self.eta = eta
        self.eta_vals = eta.value(z) if z.size else np.empty(0)
        if self.eta_vals.size and np.any(self.eta_vals <= -1.0):
            raise ValueError("jump sizes must stay above -1 on the nodes")

    @classmethod
    def from_density(cls, density, interval, n, eta) -> "JumpSpec":
        """Discretize ``density`` on ``interval`` with composite Simpson."""
        a, b = float(interval[0]), float(interval[1])
        if not b > a:
            raise ValueError("empty jump interval")
        z, quad = _simpson_weights(a, b, int(n))
        dens = np.asarray(density(z), dtype=float)
        if np.any(dens < 0):
            raise ValueError("jump density must be nonnegative")
        return cls(z=z, w=quad * dens, eta=eta)

    def eta_at(self, z):
        return self.eta.value(z)

    def eta_bounds(self) -> tuple[float, float]:
        """Smallest and largest jump size over the nodes."""
        if self.eta_vals.size == 0:
            return 0.0, 0.0
        return float(self.eta_vals.min()), float(self.eta_vals.max())

    def to_dict(self) -> dict:
        return {
            "eta": self.eta.to_dict(),
            "nodes": [[float(a), float(b)] for a, b in zip(self.z, self.w)],
        }


def jump_spec_from_dict(d: dict) -> JumpSpec:
    eta = _eta_from_dict(d["eta"])
    if "nodes" in d:
        nodes = np.asarray(d["nodes"], dtype=float)
        if nodes.size == 0:
            return JumpSpec(z=np.empty(0), w=np.empty(0), eta=eta)
        return JumpSpec(z=nodes[:, 0], w=nodes[:, 1], eta=eta)
    if "density" in d:
        dens = d["density"]
        kind = dens.get("kind", "uniform")
        scale = float(dens.get("scale", 1.0))
        if kind == "uniform":
            fn = lambda z: scale * np.ones_like(z)
        elif kind == "gaussian":
            mean, sd = float(dens["mean"]), float(dens["sd"])
            fn = lambda z: scale * np.exp(-0.5 * ((z - mean) / sd) ** 2) / (
                sd * math.sqrt(2 * math.pi)
            )
        else:
            raise ValueError(f"unknown jump density kind {kind!r}")
        return JumpSpec.from_density(
            density=fn, interval=d["interval"], n=int(d.get("n", DEFAULT_JUMP_NODES)), eta=eta
        )
    raise ValueError("jump spec needs either explicit nodes or a density")


def jump_integrals(spec: JumpSpec) -> JumpIntegrals:
    """Weighted node sums: int eta, int eta^2, total mass, and the squared
    jump-product growth rate ``c = int ((1+eta)^2 - 1) dnu / mass``."""
    if spec.z.size == 0:
        return JumpIntegrals(0.0, 0.0, 0.0, 0.0)
    e = spec.eta_vals
    int_eta = float(np.dot(spec.w, e))
    int_eta_sq = float(np.dot(spec.w, e * e))
    mass = float(np.sum(spec.w))
    c = (2.0 * int_eta + int_eta_sq) / mass if mass > 0 else 0.0
    return JumpIntegrals(int_eta, int_eta_sq, mass, c)


# ---------------------------------------------------------------------------
# Market model
# ---------------------------------------------------------------------------


@dataclass
class MarketModel:
    """Market primitives: regime rates, per-regime drift and short rate,
    volatility (constant per regime or tabulated in time), and jump measure.

    Exactly one of ``sigma_values`` (shape ``(k,)``) or ``sigma_table``
    (``(t_knots, values)`` with values of shape ``(k, len(t_knots))``) must
    be given.
    """

    rates: RateSpec
    r: np.ndarray
    mu: np.ndarray
    jump: JumpSpec
    horizon: float
    sigma_values: np.ndarray | None = None
    sigma_table: tuple | None = None
    time_nodes: int = DEFAULT_TIME_NODES

    def __post_init__(self):
        k = self.rates.n_states
        self.r = np.asarray(self.r, dtype=float)
        self.mu = np.asarray(self.mu, dtype=float)
        if self.r.shape != (k,) or self.mu.shape != (k,):
            raise ValueError("r and mu must have one entry per regime")
        if not (np.all(np.isfinite(self.r)) and np.all(np.isfinite(self.mu))):
            raise ValueError("r and mu must be finite")
        if (self.sigma_values is None) == (self.sigma_table is None):
            raise ValueError("give exactly one of sigma_values or sigma_table")
        if self.sigma_values is not None:
            self.sigma_values = np.asarray(self.sigma_values, dtype=float)
            if self.sigma_values.shape != (k,):
                raise ValueError("sigma_values must have one entry per regime")
            if np.any(self.sigma_values <= 0) or not np.all(np.isfinite(self.sigma_values)):
                raise ValueError("volatility must be positive and finite")
        else:
            t_knots, vals = self.sigma_table
            t_knots = np.asarray(t_knots, dtype=float)
            vals = np.asarray(vals, dtype=float)
            if vals.shape != (k, t_knots.size) or np.any(np.diff(t_knots) <= 0):
                raise ValueError("sigma table must be (increasing knots, (k, n) values)")
            if np.any(vals <= 0) or not np.all(np.isfinite(vals)):
                raise ValueError("volatility must be positive and finite")
            self.sigma_table = (t_knots, vals)
        if not (self.horizon > 0 and math.isfinite(self.horizon)):
            raise ValueError("horizon must be positive")
        if self.time_nodes % 2 == 0:
            self.time_nodes += 1
        self.ints = jump_integrals(self.jump)

    # -- volatility ---------------------------------------------------------

    @property
    def n_states(self) -> int:
        return self.rates.n_states

    def sigma(self, t, i: int):
        """Volatility of regime ``i`` at time ``t`` (vectorized in ``t``)."""
        if self.sigma_values is not None:
            t = np.asarray(t, dtype=float)
            out = np.full_like(t, self.sigma_values[i])
            return out if out.ndim else float(out)
        knots, vals = self.sigma_table
        out = np.interp(np.asarray(t, dtype=float), knots, vals[i])
        return out if out.ndim else float(out)

    def sigma_sup(self) -> float:
        if self.sigma_values is not None:
            return float(np.max(self.sigma_values))
        return float(np.max(self.sigma_table[1]))

    def sigma_sq_integral(self, t0: float, t1: float, i: int) -> float:
        """Integral of ``sigma(t, i)^2`` over ``[t0, t1]``.

        Closed form for constant volatility; composite Simpson on the shared
        time sub-grid for the tabulated kind, so that the simulator and the
        pricing kernel consume identical integrals.
        """
        if t1 <= t0:
            return 0.0
        if self.sigma_values is not None:
            return float(self.sigma_values[i] ** 2) * (t1 - t0)
        return self.time_integral(lambda t: self.sigma(t, i) ** 2, t0, t1)

    def time_integral(self, fn, t0: float, t1: float) -> float:
        """Composite Simpson with the model's shared time sub-grid."""
        if t1 <= t0:
            return 0.0
        t, w = _simpson_weights(t0, t1, self.time_nodes)
        return float(np.dot(w, fn(t)))

    # -- measure change -----------------------------------------------------

    def j_ratio(self, t, i: int):
        """Measure-change ratio ``(r - mu - int eta) / (sigma^2 + int eta^2)``."""
        sig = self.sigma(t, i)
        return (self.r[i] - self.mu[i] - self.ints.int_eta) / (
            np.asarray(sig) ** 2 + self.ints.int_eta_sq
        )

    def to_dict(self) -> dict:
        if self.sigma_values is not None:
            sigma = {"kind": "constant", "values": self.sigma_values.tolist()}
        else:
            knots, vals = self.sigma_table
            sigma = {"kind": "table", "t": knots.tolist(), "values": vals.tolist()}
        return {
            "regimes": self.rates.to_dict(),
            "r": self.r.tolist(),
            "mu": self.mu.tolist(),
            "sigma": sigma,
            "jump": self.jump.to_dict(),
            "T": self.horizon,
            "time_nodes": self.time_nodes,
        }


def market_model_from_dict(d: dict) -> MarketModel:
    """Build a :class:`MarketModel` from its dict form."""
    try:
        rates = rate_spec_from_dict(d["regimes"])
        sigma = d["sigma"]
        kwargs: dict = {}
        if sigma["kind"] == "constant":
            kwargs["sigma_values"] = np.asarray(sigma["values"], dtype=float)
        elif sigma["kind"] == "table":
            kwargs["sigma_table"] = (
                np.asarray(sigma["t"], dtype=float),
                np.asarray(sigma["values"], dtype=float),
            )
        else:
            raise ValueError(f"unknown sigma kind {sigma['kind']!r}")
        return MarketModel(
            rates=rates,
            r=np.asarray(d["r"], dtype=float),
            mu=np.asarray(d["mu"], dtype=float),
            jump=jump_spec_from_dict(d["jump"]),
            horizon=float(d["T"] if "T" in d else d["horizon"]),
            time_nodes=int(d.get("time_nodes", DEFAULT_TIME_NODES)),
            **kwargs,
        )
    except KeyError as exc:
        raise ValueError(f"malformed market model: missing {exc}") from exc


# ---------------------------------------------------------------------------
# Admissibility
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoArbitrageReport:
    """Worst margin of ``1 + J(t, i) * eta(z)`` over times, regimes, nodes.

    The measure change is admissible iff the margin stays positive.
    """

    passed: bool
    worst_margin: float
    witness_t: float | None
    witness_state: int | None
    witness_z: float | None

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "worst_margin": self.worst_margin,
            "witness": {"t": self.witness_t, "state": self.witness_state, "z": self.witness_z},
        }


def check_no_arbitrage(model: MarketModel, t_grid=None) -> NoArbitrageReport:
    """Check the positivity of the tilted jump intensity everywhere.

    With constant volatility a single time point suffices; tabulated
    volatility is scanned on a uniform grid joined with its knots (the
    ratio is monotone in sigma, so knots and endpoints are the candidate
    extrema of the piecewise-linear table).
    """
    if model.jump.z.size == 0:
        return NoArbitrageReport(True, math.inf, None, None, None)
    if t_grid is None:
        if model.sigma_values is not None:
            t_grid = np.array([0.0])
        else:
            t_grid = np.union1d(
                np.linspace(0.0, model.horizon, 101), model.sigma_table[0]
            )
    t_grid = np.asarray(t_grid, dtype=float)
    eta = model.jump.eta_vals
    worst = math.inf
    witness = (None, None, None)
    for i in range(model.n_states):
        ratios = model.j_ratio(t_grid, i)
        margins = 1.0 + np.outer(ratios, eta)
        idx = np.unravel_index(np.argmin(margins), margins.shape)
        if margins[idx] < worst:
            worst = float(margins[idx])
            witness = (float(t_grid[idx[0]]), i, float(model.jump.z[idx[1]]))
    return NoArbitrageReport(
        passed=worst > 0.0,
        worst_margin=worst,
        witness_t=witness[0],
        witness_state=witness[1],
        witness_z=witness[2],
    )


# ---------------------------------------------------------------------------
# Measure-change coefficients
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EmmCoefficients:
    """Coefficients of the minimal martingale measure at ``(t, i)``."""

    ratio: float
    drift_shift: float
    gamma: np.ndarray

    def to_dict(self) -> dict:
        return {
            "ratio": self.ratio,
            "drift_shift": self.drift_shift,
            "gamma": self.gamma.tolist(),
        }


def mmm_coefficients(model: MarketModel, t: float, i: int) -> EmmCoefficients:
    """Ratio ``J``, Brownian drift shift ``J sigma``, and jump tilts
    ``Gamma = 1 + J eta`` on the nodes."""
    ratio = float(model.j_ratio(t, i))
    return EmmCoefficients(
        ratio=ratio,
        drift_shift=ratio * float(model.sigma(t, i)),
        gamma=1.0 + ratio * model.jump.eta_vals,
    )


@dataclass(frozen=True)
class MvTradeoff:
    """Local mean-variance tradeoff at ``(t, i, s_star)``: the drift
    adjustment per unit stock and the quadratic compensation rate."""

    drift_adjustment: float
    variance_rate: float

    def to_dict(self) -> dict:
        return {"drift_adjustment": self.drift_adjustment, "variance_rate": self.variance_rate}


def mv_tradeoff(model: MarketModel, t: float, i: int, s_star: float) -> MvTradeoff:
    excess = model.mu[i] - model.r[i] + model.ints.int_eta
    denom = float(model.sigma(t, i)) ** 2 + model.ints.int_eta_sq
    return MvTradeoff(
        drift_adjustment=excess / (s_star * denom),
        variance_rate=excess**2 / denom,
    )


# ---------------------------------------------------------------------------
# Path simulation
# ---------------------------------------------------------------------------


@dataclass
class PathRecord:
    """One simulated path with its event decomposition.

    Rows (``times``, ``spot``, ``regime``, ``age``, ``events``, ``z_marks``)
    record the path at ``t = 0``, each regime switch, each jump (after the
    multiplier is applied), each requested recording time, and the horizon.
    Segment arrays carry the continuous pieces between consecutive events:
    the prevailing regime, the Brownian increment, and the realized
    log-increment of the diffusive part.  ``int_r`` is the integrated short
    rate along the path.
    """

    s0: float
    x0: int
    y0: float
    horizon: float
    times: np.ndarray
    spot: np.ndarray
    regime: np.ndarray
    age: np.ndarray
    events: np.ndarray
    z_marks: np.ndarray
    seg_t0: np.ndarray
    seg_t1: np.ndarray
    seg_state: np.ndarray
    seg_dw: np.ndarray
    seg_dlns: np.ndarray
    jump_t: np.ndarray
    jump_state: np.ndarray
    jump_z: np.ndarray
    int_r: float

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("t,S,X,Y,event,z\n")
            for t, s, x, y, ev, z in zip(
                self.times, self.spot, self.regime, self.age, self.events, self.z_marks
            ):
                fh.write(f"{t:.17g},{s:.17g},{int(x)},{y:.17g},{ev},{z:.17g}\n")


def simulate_asset_path(
    model: MarketModel,
    s0: float,
    x0: int,
    y0: float,
    rng: np.random.Generator,
    record_times=None,
) -> PathRecord:
    """Simulate one path exactly in law by event decomposition.

    The regime path is drawn first (exact holding-time inversion), then the
    jump epochs of the driving Poisson process with rate ``mass`` and their
    marks, and finally one Gaussian log-increment per inter-event segment
    with the exact integrated variance.  No time-discretization error enters;
    requested recording times only add observation rows.
    """
    if s0 <= 0:
        raise ValueError("spot must start positive")
    T = model.horizon
    regime = simulate_regime_path(model.rates, x0, y0, T, rng)

    mass = model.ints.mass
    jump_times: list[float] = []
    if mass > 0:
        t = 0.0
        while True:
            t += rng.exponential(1.0 / mass)
            if t >= T:
                break
            jump_times.append(t)
    n_jumps = len(jump_times)
    if n_jumps:
        cdf = np.cumsum(model.jump.w) / mass
        idx = np.minimum(np.searchsorted(cdf, rng.random(n_jumps)), cdf.size - 1)
        jump_z = model.jump.z[idx]
    else:
        jump_z = np.empty(0)

    # merged event timeline
    kinds: dict[float, list] = {}
    for tt in regime.times:
        kinds.setdefault(float(tt), []).append(("regime", math.nan))
    for tt, zz in zip(jump_times, jump_z):
        kinds.setdefault(float(tt), []).append(("jump", float(zz)))
    if record_times is not None:
        for tt in np.asarray(record_times, dtype=float):
            if 0.0 < tt < T:
                kinds.setdefault(float(tt), []).append(("grid", math.nan))
    kinds.setdefault(T, []).append(("grid", math.nan))

    rows = [(0.0, s0, x0, y0, "grid", math.nan)]
    seg_t0, seg_t1, seg_state, seg_dw, seg_dlns = [], [], [], [], []
    jump_state = []
    s = s0
    t_prev = 0.0
    int_r = 0.0
    for t_k in sorted(kinds):
        state = regime.state_at(t_prev)
        dt = t_k - t_prev
        if dt > 0:
            var = model.sigma_sq_integral(t_prev, t_k, state)
            xi = rng.standard_normal()
            dln = (model.mu[state] - 0.0) * dt - 0.5 * var + math.sqrt(var) * xi
            s *= math.exp(dln)
            int_r += model.r[state] * dt
            seg_t0.append(t_prev)
            seg_t1.append(t_k)
            seg_state.append(state)
            seg_dw.append(xi * math.sqrt(dt))
            seg_dlns.append(dln)
        for kind, zz in sorted(kinds[t_k], key=lambda p: {"regime": 0, "jump": 1, "grid": 2}[p[0]]):
            if kind == "jump":
                s *= 1.0 + float(model.jump.eta_at(zz))
                jump_state.append(regime.state_at(t_k))
            rows.append(
                (t_k, s, regime.state_at(t_k), regime.age_at(t_k), kind, zz)
            )
        t_prev = t_k

    times = np.array([r[0] for r in rows])
    return PathRecord(
        s0=s0,
        x0=x0,
        y0=y0,
        horizon=T,
        times=times,
        spot=np.array([r[1] for r in rows]),
        regime=np.array([r[2] for r in rows], dtype=int),
        age=np.array([r[3] for r in rows]),
        events=np.array([r[4] for r in rows], dtype=object),
        z_marks=np.array([r[5] for r in rows]),
        seg_t0=np.asarray(seg_t0),
        seg_t1=np.asarray(seg_t1),
        seg_state=np.asarray(seg_state, dtype=int),
        seg_dw=np.asarray(seg_dw),
        seg_dlns=np.asarray(seg_dlns),
        jump_t=np.asarray(jump_times),
        jump_state=np.asarray(jump_state, dtype=int),
        jump_z=np.asarray(jump_z),
        int_r=int_r,
    )


def radon_nikodym_path(model: MarketModel, path: PathRecord) -> float:
    """Density of the minimal martingale measure along one simulated path.

    Coefficients are frozen at the left endpoint of each inter-event
    segment (exact when volatility is constant per regime): the Brownian
    part contributes ``phi dW - phi^2 dt / 2`` with ``phi = J sigma``, the
    jump part ``log Gamma`` per jump, and the compensator ``-J int eta dnu``
    per unit time.

    Raises
    ------
    ValueError
        If a jump tilt is nonpositive (inadmissible measure change).
    """
    int_eta = model.ints.int_eta
    lnz = 0.0
    for t0, t1, i, dw in zip(path.seg_t0, path.seg_t1, path.seg_state, path.seg_dw):
        ratio = float(model.j_ratio(t0, int(i)))
        phi = ratio * float(model.sigma(t0, int(i)))
        dt = t1 - t0
        lnz += phi * dw - 0.5 * phi * phi * dt - ratio * int_eta * dt
    for t, i, z in zip(path.jump_t, path.jump_state, path.jump_z):
        gamma = 1.0 + float(model.j_ratio(t, int(i))) * float(model.jump.eta_at(z))
        if gamma <= 0.0:
            raise ValueError(
                f"nonpositive jump tilt at t={t:.6g}, z={z:.6g}: measure change inadmissible"
            )
        lnz += math.log(gamma)
    return math.exp(lnz)
