"""Pool the report.yaml files of several runs (e.g. the reruns written by create_variants_of_set_config.py)
and print mean and 95% confidence half-width of contract prices, profits and DisCo payment."""
from os import listdir
from os.path import isdir, isfile, join
import re
import argparse

import numpy as np, scipy.stats as st
import pandas as pd

from ContractPricing.reports import load_case_report


def compute_mean_and_conf_interval(values, confidence=.95):
    values = np.array(values, dtype=float)
    n = len(values)
    m = np.mean(values)
    if n < 2:
        return m, 0.
    se = st.sem(values)
    h = se * st.t.ppf((1 + confidence) / 2., n - 1)
    return m, h


def find_runs(logdir, prefix):
    prefix = prefix.split('/')[-1]
    if prefix.endswith('.yaml'):
        prefix = prefix[:-len('.yaml')]
    paths = sorted(p for p in listdir(logdir) if re.match(f'{re.escape(prefix)}(__.*|)$', p))
    return [join(logdir, p) for p in paths if isdir(join(logdir, p)) and isfile(join(logdir, p, 'report.yaml'))]


def get_results(run_dirs, accepted_only=True):
    """One row per run: prices and profits per unit plus the DisCo payment."""
    rows = []
    for path in run_dirs:
        report = load_case_report(path)
        if accepted_only and not report.accepted:
            print("Warning: skipping run that was not accepted:", path, report.status)
            continue
        row = dict(run=path, status=report.status, disco_payment=report.disco.get('payment_eur', np.nan),
                   loss_mwh=report.disco.get('loss_mwh', np.nan))
        for r in report.dg:
            row[f'alpha_{r["id"]}'] = r['alpha']
            row[f'profit_{r["id"]}'] = r['profit_eur']
        rows.append(row)
    return pd.DataFrame(rows)


def summarize(results: pd.DataFrame, confidence=.95):
    numeric = [c for c in results.columns if c not in ('run', 'status')]
    out = []
    for c in numeric:
        m, h = compute_mean_and_conf_interval(results[c].dropna(), confidence)
        out.append(dict(quantity=c, mean=m, std=float(np.std(results[c].dropna())), half_width=h,
                        n=int(results[c].notna().sum())))
    return pd.DataFrame(out)


if __name__ == '__main__':
    parser = argparse.ArgumentParser(description='Aggregate equilibrium results over reruns.')
    parser.add_argument('path', help='Prefix of the run directories / conf files to aggregate.')
    parser.add_argument('--logdir', default='results')
    parser.add_argument('--all', action='store_true', help='include runs that were not accepted')
    args = parser.parse_args()
    runs = find_runs(args.logdir, args.path)
    results = get_results(runs, accepted_only=not args.all)
    print(f"The results are the following {len(results)} runs:")
    print(results.to_string(index=False))
    if len(results):
        for _, r in summarize(results).iterrows():
            print(f"{r['quantity']}: Mean: {round(r['mean'], 4)}, Std: {round(r['std'], 4)}, "
                  f"+/-: {round(r['half_width'], 4)}")
