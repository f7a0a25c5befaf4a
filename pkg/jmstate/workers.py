# Пул потоков для вычислений по субъектам
import os
from concurrent.futures import ThreadPoolExecutor


def default_threads():
    """Число потоков по умолчанию"""
    try:
        return max(1, int(os.getenv('JMSTATE_THREADS', '1')))
    except ValueError:
        return 1


def parallel_map(func, items, threads=None):
    """Применяет func к элементам, результаты в исходном порядке"""
    items = list(items)
    threads = default_threads() if threads is None else max(1, int(threads))
    if threads == 1 or len(items) < 2:
        return [func(item) for item in items]

    # Запускаем задачи параллельно, порядок результатов фиксирован
    with ThreadPoolExecutor(max_workers=min(threads, len(items))) as executor:
        futures = [executor.submit(func, item) for item in items]
        return [future.result() for future in futures]
