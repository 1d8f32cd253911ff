"""Oracle self-checks: GP posterior blocks against dense conditioning and the cone
solver against interval and grid searches. Exit status 1 on any mismatch.

    python3 scripts/validate.py [--seed S]
"""

import argparse
import sys

from probf.validation import gp_oracle_suite, socp_oracle_suite


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    results = [gp_oracle_suite(seed=args.seed)] + socp_oracle_suite(seed=args.seed)
    for res in results:
        print(res.line())
    return 0 if all(r.ok for r in results) else 1


if __name__ == "__main__":
    sys.exit(main())
