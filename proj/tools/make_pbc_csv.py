"""Build data/pbc.csv from the survival::pbcseq data shipped with `rdatasets`.

Layout mirrors the long-format joint-model dataset: one row per visit, with
the survival outcome (stime, died) recorded on each subject's first row only.
Times are in years (days / 365.24).

    pip install rdatasets
    python tools/make_pbc_csv.py data/pbc.csv
"""
import math
import sys

import rdatasets

DAYS_PER_YEAR = 365.24


def main(out_path):
    d = rdatasets.data("survival", "pbcseq").sort_values(["id", "day"], kind="stable")
    first = ~d["id"].duplicated()
    with open(out_path, "w", newline="\n") as f:
        f.write("id,stime,died,trt,logb,prothrombin,time,age\n")
        for is_first, row in zip(first, d.itertuples(index=False)):
            stime = died = ""
            if is_first:
                stime = repr(row.futime / DAYS_PER_YEAR)
                died = "1" if row.status == 2 else "0"
            trt = "1" if row.trt == 1 else "0"  # 1 = D-penicillamine
            pro = "" if math.isnan(row.protime) else repr(float(row.protime))
            f.write(",".join([str(row.id), stime, died, trt, repr(math.log(row.bili)),
                              pro, repr(row.day / DAYS_PER_YEAR), repr(float(row.age))]) + "\n")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "data/pbc.csv")
