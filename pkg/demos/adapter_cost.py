"""Parameter and FLOP counts of the fusion adapters, plus wall-time scaling in T."""
from mfuser.bench import analytic_table, bench_adapters, check_ordering, format_table

for name, ok in check_ordering().items():
    print(f"{name}: {ok}")
print(format_table(analytic_table(T_grid=(1024, 4096))), end="")

# small widths keep the quadratic baseline in memory; only the trend in T matters
_, fits = bench_adapters(T_grid=(512, 1024, 2048, 4096), repeats=1)
for mode, f in fits.items():
    print(f"{mode}: R2 linear {f.r2_linear:.4f}, R2 quadratic {f.r2_quadratic:.4f}, "
          f"log-log slope {f.loglog_slope:.2f}")
