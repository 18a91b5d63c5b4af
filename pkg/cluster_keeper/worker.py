import signal
import sys
from concurrent.futures import FIRST_COMPLETED, ProcessPoolExecutor, wait
from typing import Any, Callable, List, Optional, Sequence

from colorama import Fore


class Worker:
    """Runs independent tasks, serially or in a process pool, returning results in task order.

    Ctrl+C (or SIGTERM) stops scheduling new tasks; the run then raises KeyboardInterrupt.
    """

    def __init__(self, threads: int = 1, progress_every: int = 10, label: str = "simulation", quiet: bool = False):
        self.threads = max(1, int(threads))
        self.progress_every = max(1, int(progress_every))
        self.label = label
        self.quiet = quiet
        self._running = True

    def _handle_stop(self, *_):
        self._running = False

    def _say(self, text: str, color: str = "") -> None:
        if not self.quiet:
            print(color + text, file=sys.stderr)

    def _install_handlers(self) -> dict:
        previous = {}
        for sig in (signal.SIGINT, getattr(signal, "SIGTERM", None)):
            if sig is None:
                continue
            try:
                previous[sig] = signal.signal(sig, self._handle_stop)
            except (ValueError, OSError):
                pass  # not the main thread
        return previous

    def run(self, fn: Callable[[Any], Any], tasks: Sequence[Any]) -> List[Any]:
        previous = self._install_handlers()
        self._say(f"{self.label} worker started: {len(tasks)} task(s), {self.threads} process(es).", "")
        try:
            if self.threads == 1:
                results = self._run_serial(fn, tasks)
            else:
                results = self._run_pool(fn, tasks)
        finally:
            for sig, handler in previous.items():
                signal.signal(sig, handler)
        if not self._running:
            self._say("Worker stopped.", Fore.YELLOW)
            raise KeyboardInterrupt
        self._say(f"{self.label} worker finished.", Fore.GREEN)
        return results

    def _tick(self, done: int, total: int) -> None:
        if done % self.progress_every == 0 or done == total:
            self._say(f"tasks={done}/{total}")

    def _run_serial(self, fn, tasks) -> List[Any]:
        results: List[Optional[Any]] = []
        for k, task in enumerate(tasks):
            if not self._running:
                break
            results.append(fn(task))
            self._tick(k + 1, len(tasks))
        return results

    def _run_pool(self, fn, tasks) -> List[Any]:
        results: List[Optional[Any]] = [None] * len(tasks)
        with ProcessPoolExecutor(max_workers=self.threads) as pool:
            pending = {pool.submit(fn, task): k for k, task in enumerate(tasks)}
            done = 0
            while pending:
                finished, _ = wait(pending, timeout=0.5, return_when=FIRST_COMPLETED)
                for fut in finished:
                    results[pending.pop(fut)] = fut.result()
                    done += 1
                    self._tick(done, len(tasks))
                if not self._running:
                    for fut in pending:
                        fut.cancel()
                    break
        return results


def run(fn: Callable[[Any], Any], tasks: Sequence[Any], threads: int = 1, **kwargs) -> List[Any]:
    return Worker(threads, **kwargs).run(fn, tasks)
