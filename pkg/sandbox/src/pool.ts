/**
 * Bounded concurrency for executions. Each request already runs in its own
 * subprocess; the pool only caps how many are alive at once.
 */

export class WorkerPool {
  private active = 0;
  private readonly waiters: Array<() => void> = [];

  constructor(private readonly maxWorkers: number) {
    if (!Number.isInteger(maxWorkers) || maxWorkers < 1) {
      throw new Error(`maxWorkers must be a positive integer, got ${maxWorkers}`);
    }
  }

  async run<T>(task: () => Promise<T>): Promise<T> {
    if (this.active >= this.maxWorkers) {
      await new Promise<void>((resolve) => this.waiters.push(resolve));
    }
    this.active += 1;
    try {
      return await task();
    } finally {
      this.active -= 1;
      const next = this.waiters.shift();
      if (next) next();
    }
  }

  get stats(): { active: number; queued: number; max: number } {
    return {
      active: this.active,
      queued: this.waiters.length,
      max: this.maxWorkers,
    };
  }
}
