"""Print the scenario matrix and tolerance table for the default topology (and CTV)."""

from vaultlab.threats import RunOptions, matrix_table, not_applicable, run_matrix, tolerance_oracle


def main():
    print(tolerance_oracle().text())
    for mechanism in ("deleted-key", "ctv"):
        rows = [(mechanism, out) for out in run_matrix(RunOptions(mechanism=mechanism))]
        print(matrix_table(rows, not_applicable(mechanism)))


if __name__ == "__main__":
    main()
