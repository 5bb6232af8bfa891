#!/usr/bin/env python3
"""
Check a run configuration and the data it points at
"""

import os
import sys

# Better approach for tools scripts - try direct import first
try:
    from coherence_warning.config import ConfigError, load_config
    from coherence_warning.timeseries import DataError, load_series
except ImportError:
    # If direct import fails, add parent directory to path
    sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
    from coherence_warning.config import ConfigError, load_config
    from coherence_warning.timeseries import DataError, load_series

path = sys.argv[1] if len(sys.argv) > 1 else None

print("[CONFIG] Run Configuration Analysis")
print("=" * 45)

try:
    config = load_config(path, require_files=False)
    print(f"Data:          {config.data or '(none)'}")
    print(f"Manifest:      {config.manifest or '(none)'}")
    print(f"Channels:      {', '.join(config.channels)}")
    print(
        f"Cell:          {config.cell_kind} "
        f"(d={config.hidden_dim}, leads={config.leads})"
    )
    print(
        f"Schedule:      K={config.epochs}, K0={config.warmup}, "
        f"lambda0={config.lambda0}, gamma={config.gamma}"
    )
    print(f"Target ARL0:   {config.target_arl0:g} (n_boot={config.n_boot})")
    print(f"Workers:       {config.resolved_workers()}")

    print("-" * 35)

    if config.data:
        print("\n[INFO] Input series:")
        print("-" * 25)
        series = load_series(config.data, config.channels)
        hourly = series.is_hourly
        print(f"sites: {len(series.sites)}")
        print(f"steps: {series.n_times} ({'hourly' if hourly else 'daily'})")
        print(f"span:  {series.times[0]} .. {series.times[-1]}")
        print(
            f"block_len: {config.resolved_block_len(hourly)}, "
            f"purge_gap: {config.resolved_purge_gap(hourly)}"
        )
        split = config.split_spec(series.times)
        print(f"train_end: {split.train_end}, val_end: {split.val_end}")

except (ConfigError, DataError) as e:
    print(f"[ERROR] {e}")
    sys.exit(1)
