"""Cauchy convergence of the explicit and implicit replicator schemes on the bundled crowd."""

from labelflow.harness import bundled_path, convergence_study, load_scenario


def main():
    scenario = load_scenario(bundled_path("replicator_crowd"))
    for mode in ("explicit", "prox-hellinger"):
        report = convergence_study(scenario, [16, 32, 64, 128], mode=mode)
        print(f"{mode}:")
        for row in report.rows:
            print(f"  k={row.k:<4d} gap={row.w1_gap:.3e}")
        print(f"  fitted slope {report.slope():.3f}")


if __name__ == "__main__":
    main()
