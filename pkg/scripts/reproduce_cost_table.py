#!/usr/bin/env python3
"""Print the per-component cost breakdown for both backbones at full
KITTI-grid resolution, plus the dense/baseline ratios, and compare three
growth schedules side by side."""

from densepillars.backbones import BaselineBackboneSpec, DenseBackboneSpec, GrowthSchedule
from densepillars.cost import comparison_report, dense_backbone_cost
from densepillars.encoder import GridSpec


def main():
    grid = GridSpec()
    dense, base, ratios = comparison_report(
        grid, DenseBackboneSpec(), BaselineBackboneSpec()
    )
    print(f"input pseudo-image: {grid.feature_channels}x{grid.height}x{grid.width}\n")
    print("baseline backbone pipeline")
    print(base.render_table())
    print("\ndense backbone pipeline (table-matched growth)")
    print(dense.render_table())
    print(f"\nbackbone param ratio (baseline/dense): {ratios['param_ratio']:.2f}")
    print(f"backbone MAC ratio   (baseline/dense): {ratios['mac_ratio']:.2f}")

    print("\ngrowth schedule comparison (dense backbone only)")
    print(f"{'schedule':<20}{'params':>12}{'GMACs':>10}")
    for name, growth in (
        ("fixed k=16", GrowthSchedule("fixed", 16)),
        ("fixed k=32", GrowthSchedule("fixed", 32)),
        ("fixed k=64", GrowthSchedule("fixed", 64)),
        ("table-matched", GrowthSchedule("table_matched")),
        ("doubling k0=32", GrowthSchedule("doubling", 32)),
    ):
        c = dense_backbone_cost(DenseBackboneSpec(growth=growth), grid.height, grid.width)
        print(f"{name:<20}{c.params:>12,}{c.macs / 1e9:>10.2f}")


if __name__ == "__main__":
    main()
