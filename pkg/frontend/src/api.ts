/** Typed client for the generation service; fetch is injectable for tests. */

export interface Catalog {
  classes: string[];
  keywords: string[];
  partial_shapes: { id: string; category?: string; preview: string }[];
}

export interface JobView {
  state: "queued" | "running" | "done" | "failed";
  progress: number;
  error?: string;
  mesh?: string;
  timings: Record<string, number>;
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class Busy extends Error {
  constructor(public retryAfterS: number) {
    super(`service busy, retry in ${retryAfterS}s`);
  }
}

export class ApiClient {
  constructor(
    private baseUrl: string,
    private fetchImpl: FetchLike = (u, i) => fetch(u, i),
  ) {}

  async health(): Promise<boolean> {
    try {
      const r = await this.fetchImpl(`${this.baseUrl}/api/health`);
      return r.status === 200;
    } catch {
      return false;
    }
  }

  async catalog(): Promise<Catalog> {
    const r = await this.fetchImpl(`${this.baseUrl}/api/catalog`);
    if (r.status !== 200) throw new Error(`catalog failed: HTTP ${r.status}`);
    return (await r.json()) as Catalog;
  }

  /** POST the exact body bytes; 429 raises Busy with the server's hint. */
  async submit(bodyBytes: string): Promise<string> {
    const r = await this.fetchImpl(`${this.baseUrl}/api/generate`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: bodyBytes,
    });
    const data = (await r.json()) as Record<string, unknown>;
    if (r.status === 429) {
      throw new Busy(Number(data["retry_after_s"] ?? 2));
    }
    if (r.status !== 202) {
      throw new Error(`generate rejected: ${data["error"] ?? r.status}`);
    }
    return data["job_id"] as string;
  }

  async job(id: string): Promise<JobView> {
    const r = await this.fetchImpl(`${this.baseUrl}/api/jobs/${id}`);
    if (r.status === 404) throw new Error(`unknown job ${id}`);
    return (await r.json()) as JobView;
  }

  /**
   * Poll until the job reaches a terminal state. Resolves with the final view
   * (including a failed one: the caller decides how to surface the error).
   */
  async pollJob(
    id: string,
    opts: { intervalMs?: number; timeoutMs?: number; onProgress?: (p: number) => void } = {},
  ): Promise<JobView> {
    const interval = opts.intervalMs ?? 300;
    const deadline = Date.now() + (opts.timeoutMs ?? 120_000);
    for (;;) {
      const view = await this.job(id);
      opts.onProgress?.(view.progress);
      if (view.state === "done" || view.state === "failed") return view;
      if (Date.now() > deadline) throw new Error(`job ${id} timed out`);
      await new Promise((res) => setTimeout(res, interval));
    }
  }

  /** Submit with bounded retries on backpressure. */
  async submitWithRetry(
    bodyBytes: string,
    opts: { maxRetries?: number; onBusy?: (attempt: number) => void } = {},
  ): Promise<string> {
    const max = opts.maxRetries ?? 5;
    for (let attempt = 0; ; attempt++) {
      try {
        return await this.submit(bodyBytes);
      } catch (e) {
        if (e instanceof Busy && attempt < max) {
          opts.onBusy?.(attempt + 1);
          await new Promise((res) => setTimeout(res, e.retryAfterS * 1000));
          continue;
        }
        throw e;
      }
    }
  }
}
