"""Simulation and structural estimation of GSP ad auctions with bid recommendations."""
from .market import (CALIBRATED_SEED, CALIBRATED_TARGETS, Bound, BidderProfile, BoundedValuation,
                     CtrCurve, Group, LognormalMixture, MarketConfig, MarketTargets, PointValuation,
                     QualityModel, calibrated_market, default_ctr, generate_market, sample_quality)
from .gsp import (AuctionOutcome, BidProfile, RecommendationSet, clear_auction,
                  make_recommendations, simulate_platform_quality)
from .density import (KdeModel, RankScoreDensities, conditional_mean_below, density, fit_kde,
                      fit_rank_densities, quadrature_over_quality)
from .valuation import (BidRecord, PseudoValueSample, ValuationBounds, bound_adhering_values,
                        estimate_constructing_values, invert_bid, payoff_derivative)
from .strategies import (AdherencePolicy, Fallback, PolynomialBidModel, ShadingModel,
                         adhering_bid, best_response_bid, calibrate_adherence, envy_free_bids,
                         theorem1_test)
from .counterfactual import (ScenarioResult, calibrate_cells, ordinal_pattern, run_scenario,
                             simulate_batch, sweep)
from .panel import (DidEstimate, Panel, PanelObservation, PositionGroup, did_fit, format_report,
                    make_synthetic_panel, planted_panel)
from .config import ConfigError, RunConfig, load_config, parse_config

__version__ = "0.1.0"
