#!/usr/bin/env python3
"""
Исследование восстановления параметров совместной модели
Повторяет генерацию и подгонку, считает смещение, SE и покрытие 95% интервалов
"""

import argparse
import json
import statistics
import sys
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from datetime import datetime

import numpy as np

from jmstate import create_logger
from jmstate.errors import JMStateError
from jmstate.estimate import FitControl, fit
from jmstate.params import pack
from jmstate.simulate import reference_design, reference_spec, simulate_dataset

Z95 = 1.96


class RecoveryStudy:
    def __init__(self, n_subjects=500, gh_orders=(9,), seed=0, hessian=True):
        self.n_subjects = n_subjects
        self.gh_orders = tuple(gh_orders)
        self.seed = seed
        self.hessian = hessian
        design = reference_design(n_subjects, seed)
        # сплайны зависят от узлов, расставленных по данным
        self.truth = {name: value for name, value in pack(design.params, design.spec).as_dict().items()
                      if not name.startswith("spline")}

    def run_replicate(self, replicate):
        """Одна генерация и подгонки для всех порядков квадратуры"""
        design = reference_design(self.n_subjects, self.seed + replicate)
        dataset, _ = simulate_dataset(design, threads=1)
        results = []
        for gh_order in self.gh_orders:
            start_time = time.time()
            try:
                result = fit(dataset, reference_spec(knots=None),
                             FitControl(gh_order=gh_order, hessian=self.hessian, threads=1))
                estimates = dict(zip(result.names, result.theta_hat.values.tolist()))
                errors = dict(zip(result.names, result.se.tolist()))
                results.append({
                    'replicate': replicate,
                    'gh_order': gh_order,
                    'success': True,
                    'converged': result.convergence['converged'],
                    'flags': result.flags,
                    'duration_s': time.time() - start_time,
                    'estimates': {name: estimates[name] for name in self.truth},
                    'se': {name: errors[name] for name in self.truth},
                })
            except JMStateError as e:
                results.append({
                    'replicate': replicate,
                    'gh_order': gh_order,
                    'success': False,
                    'duration_s': time.time() - start_time,
                    'error': e.message,
                })
        return results

    def run_all(self, n_replicates=10, workers=1):
        """Запускает все повторения"""
        print("🔬 ИССЛЕДОВАНИЕ ВОССТАНОВЛЕНИЯ ПАРАМЕТРОВ")
        print("=" * 50)
        print(f"Субъектов: {self.n_subjects}, повторений: {n_replicates}, узлов ГЭ: {self.gh_orders}")
        print(f"Время начала: {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}")
        print()

        results = []
        # Повторения параллельно
        with ThreadPoolExecutor(max_workers=workers) as executor:
            futures = [executor.submit(self.run_replicate, r) for r in range(n_replicates)]
            for future in as_completed(futures):
                try:
                    results.extend(future.result())
                except Exception as e:
                    print(f"❌ Ошибка в потоке: {e}")
        results.sort(key=lambda r: (r['gh_order'], r['replicate']))
        return results

    def summarize(self, results, gh_order):
        """Среднее, средняя SE, SD, относительное смещение (%), покрытие (%) по параметрам"""
        successful = [r for r in results if r['gh_order'] == gh_order and r['success']]
        rows = []
        for name, truth in self.truth.items():
            estimates = [r['estimates'][name] for r in successful]
            errors = [r['se'][name] for r in successful]
            if not estimates:
                continue
            covered = [abs(e - truth) <= Z95 * s for e, s in zip(estimates, errors) if np.isfinite(s)]
            mean = statistics.mean(estimates)
            rows.append({
                'name': name,
                'truth': truth,
                'mean': mean,
                'mean_se': statistics.mean(errors),
                'sd': statistics.stdev(estimates) if len(estimates) > 1 else float('nan'),
                'relative_bias': 100.0 * (mean - truth) / truth if truth else float('nan'),
                'coverage': 100.0 * sum(covered) / len(covered) if covered else float('nan'),
            })
        return rows

    def analyze_results(self, results):
        summaries = {}
        for gh_order in self.gh_orders:
            rows = self.summarize(results, gh_order)
            summaries[gh_order] = rows
            selected = [r for r in results if r['gh_order'] == gh_order]
            failed = [r for r in selected if not r['success']]

            print(f"📊 Узлов Гаусса-Эрмита: {gh_order}")
            print(f"   ✅ Успешных подгонок: {len(selected) - len(failed)}/{len(selected)}")
            if selected:
                print(f"   ⏱️  Среднее время: {statistics.mean(r['duration_s'] for r in selected):.1f} с")
            print(f"   {'параметр':<24}{'истина':>9}{'среднее':>9}{'SE':>8}{'SD':>8}{'смещ.%':>9}{'покр.%':>8}")
            for row in rows:
                print(f"   {row['name']:<24}{row['truth']:>9.3f}{row['mean']:>9.3f}{row['mean_se']:>8.3f}"
                      f"{row['sd']:>8.3f}{row['relative_bias']:>9.1f}{row['coverage']:>8.1f}")
            if failed:
                print(f"   🔍 Ошибки:")
                error_counts = {}
                for r in failed:
                    error_counts[r['error']] = error_counts.get(r['error'], 0) + 1
                for error, count in error_counts.items():
                    print(f"      {error}: {count} раз")
            print()
        return summaries

    def save_results(self, results, summaries):
        """Сохраняет результаты в файл"""
        timestamp = datetime.now().strftime("%Y%m%d_%H%M%S")
        filename = f"recovery_results_{timestamp}.json"
        try:
            with open(filename, 'w', encoding='utf-8') as f:
                json.dump({
                    'timestamp': timestamp,
                    'n_subjects': self.n_subjects,
                    'seed': self.seed,
                    'gh_orders': list(self.gh_orders),
                    'summaries': {str(k): v for k, v in summaries.items()},
                    'results': results,
                }, f, indent=2, ensure_ascii=False)
            print(f"💾 Результаты сохранены в: {filename}")
        except OSError as e:
            print(f"❌ Ошибка сохранения результатов: {e}")


def main():
    parser = argparse.ArgumentParser(description='Исследование восстановления параметров')
    parser.add_argument('--replicates', type=int, default=10, help='Число повторений')
    parser.add_argument('--subjects', type=int, default=500, help='Субъектов в повторении')
    parser.add_argument('--gh-orders', type=int, nargs='+', default=[9], help='Порядки квадратуры')
    parser.add_argument('--workers', type=int, default=1, help='Параллельных повторений')
    parser.add_argument('--seed', type=int, default=0)
    parser.add_argument('--no-hessian', action='store_true', help='Без стандартных ошибок')
    args = parser.parse_args()

    create_logger()
    study = RecoveryStudy(args.subjects, args.gh_orders, args.seed, hessian=not args.no_hessian)
    results = study.run_all(args.replicates, args.workers)
    summaries = study.analyze_results(results)
    study.save_results(results, summaries)
    return 0 if all(r['success'] for r in results) else 1


if __name__ == '__main__':
    sys.exit(main())
