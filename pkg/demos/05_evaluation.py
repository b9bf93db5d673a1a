"""
Stratified RMSE, site windows and report comparison
====================================================

Errors are reported overall and in three bins of the true irradiance.
Site evaluation keeps only chosen pixels during a local-time window, and two
reports are compared as a relative RMSE change.
"""
from datetime import datetime, timezone

import numpy as np

from dsrnowcast.eval import (SiteSpec, compare_reports, format_comparison, format_table, report_from_values,
                             site_eval, stratified_rmse)
from dsrnowcast.gridio import HOUR, GridFrame

rng = np.random.default_rng(1)
truth = rng.uniform(0, 1000, (24, 30, 30))
truth[:, :, :5] = 0.0  # a strip of night
noisy = np.clip(truth + rng.normal(0, 60, truth.shape), 0, None)
biased = noisy + 25.0

a = stratified_rmse(noisy, truth, horizon=1, meta={"model": "noisy"})
b = stratified_rmse(biased, truth, horizon=1, meta={"model": "biased"})
print(format_table([a, b]))
print()
print("daylight only:", round(stratified_rmse(noisy, truth, daylight_only=True).rmse, 1))

# the overall MSE is the count-weighted mean of the bin MSEs
parts = sum(s.rmse ** 2 * s.n for s in a.bins) / a.n
print("decomposition check: %.6f vs %.6f" % (a.rmse ** 2, parts))

# site windows are in local time; 18:00 UTC is 10:00 at UTC-8
t0 = int(datetime(2020, 6, 1, 12, tzinfo=timezone.utc).timestamp())
frames_t = [GridFrame(t0 + k * HOUR, truth[k]) for k in range(24)]
frames_p = [GridFrame(t0 + k * HOUR, noisy[k]) for k in range(24)]
sites = [SiteSpec("farm", 0.0, 0.0, 10, 12), SiteSpec("city", 0.0, 0.0, 20, 25)]
rep = site_eval(frames_p, frames_t, sites)
print("\nsite evaluation over", rep.n, "site-hours between 10:00 and 15:00 local:", round(rep.rmse, 1))

# relative change between two published reports
ref = report_from_values(124.9, [165.3, 170.7, 103.5], meta={"model": "reference"})
new = report_from_values(108.6, [135.3, 131.7, 98.3], meta={"model": "candidate"})
print("\nRMSE decrease, reference -> candidate:")
print(format_comparison(compare_reports(ref, new)))
