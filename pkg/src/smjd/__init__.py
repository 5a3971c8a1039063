"""Pricing, hedging, and simulation for a regime-switching jump-diffusion
market whose regime is a semi-Markov chain with age-dependent switch rates."""

from .fd import explicit_gain, solve_price_fd
from .market import (
    EmmCoefficients,
    EtaClamp,
    EtaTable,
    JumpIntegrals,
    JumpSpec,
    MarketModel,
    MvTradeoff,
    NoArbitrageReport,
    PathRecord,
    check_no_arbitrage,
    jump_integrals,
    market_model_from_dict,
    mmm_coefficients,
    mv_tradeoff,
    radon_nikodym_path,
    simulate_asset_path,
)
from .mc import (
    BacktestReport,
    McEstimate,
    backtest_hedge,
    price_mc_p_weighted,
    price_mc_q,
)
from .payoffs import Payoff, payoff_from_dict
from .pricing import (
    AdmissibilityWarning,
    GridResolutionError,
    PriceSurface,
    SurfaceGrid,
    build_grid,
    compute_betas,
    evolution_apply,
    evolution_step,
    hedge_ratio,
    jump_operator,
    kernel_params,
    lognormal_expect,
    solve_price,
)
from .regimes import (
    ConstantRate,
    RateSpec,
    RegimePath,
    TableRate,
    WeibullRate,
    cumulative_hazard,
    embedded_probs,
    holding_cdf,
    holding_density,
    rate_spec_from_dict,
    sample_transition,
    simulate_regime_path,
    validate_rates,
)

__version__ = "0.1.0"

__all__ = [
    "AdmissibilityWarning",
    "BacktestReport",
    "ConstantRate",
    "EmmCoefficients",
    "EtaClamp",
    "EtaTable",
    "GridResolutionError",
    "JumpIntegrals",
    "JumpSpec",
    "MarketModel",
    "McEstimate",
    "MvTradeoff",
    "NoArbitrageReport",
    "PathRecord",
    "Payoff",
    "PriceSurface",
    "RateSpec",
    "RegimePath",
    "SurfaceGrid",
    "TableRate",
    "WeibullRate",
    "backtest_hedge",
    "build_grid",
    "check_no_arbitrage",
    "compute_betas",
    "cumulative_hazard",
    "embedded_probs",
    "evolution_apply",
    "evolution_step",
    "explicit_gain",
    "hedge_ratio",
    "holding_cdf",
    "holding_density",
    "jump_integrals",
    "jump_operator",
    "kernel_params",
    "lognormal_expect",
    "market_model_from_dict",
    "mmm_coefficients",
    "mv_tradeoff",
    "payoff_from_dict",
    "price_mc_p_weighted",
    "price_mc_q",
    "radon_nikodym_path",
    "rate_spec_from_dict",
    "sample_transition",
    "simulate_asset_path",
    "simulate_regime_path",
    "solve_price",
    "solve_price_fd",
    "validate_rates",
    "__version__",
]
