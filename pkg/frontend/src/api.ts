/**
 * Thin typed client for the rating service API.
 *
 * Submissions are idempotent server-side (last write per evaluator/item/key
 * wins), so transient failures are retried with a short backoff. A 422
 * (out-of-range score) is surfaced to the caller instead of retried.
 */

export interface HypothesisView {
  key: string;
  text: string;
}

export interface Progress {
  rated: number;
  total: number;
}

export interface NextItem {
  done: boolean;
  item_id?: string;
  source_text?: string;
  hypotheses?: HypothesisView[];
  rated_keys?: string[];
  progress: Progress;
}

export interface RatingSubmission {
  evaluator_id: string;
  item_id: string;
  blind_key: string;
  adequacy: number;
  fluency: number;
}

export class ApiError extends Error {
  constructor(
    message: string,
    public readonly status: number,
  ) {
    super(message);
  }
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

const RETRIES = 3;
const RETRY_DELAY_MS = 400;

function sleep(ms: number): Promise<void> {
  return new Promise((resolve) => setTimeout(resolve, ms));
}

export class ApiClient {
  constructor(
    private readonly baseUrl: string,
    private readonly campaignId: string,
    private readonly fetchFn: FetchLike = (u, i) => fetch(u, i),
  ) {}

  private url(path: string): string {
    return `${this.baseUrl}/api/v1/campaigns/${encodeURIComponent(this.campaignId)}${path}`;
  }

  async next(evaluatorId: string): Promise<NextItem> {
    const resp = await this.fetchFn(
      this.url(`/next?evaluator=${encodeURIComponent(evaluatorId)}`),
    );
    if (!resp.ok) {
      throw new ApiError(await safeErrorText(resp), resp.status);
    }
    return (await resp.json()) as NextItem;
  }

  /** POST one rating; retries network failures, never retries a 4xx. */
  async submit(rating: RatingSubmission): Promise<void> {
    let lastError: unknown = null;
    for (let attempt = 0; attempt <= RETRIES; attempt++) {
      if (attempt > 0) {
        await sleep(RETRY_DELAY_MS * attempt);
      }
      let resp: Response;
      try {
        resp = await this.fetchFn(this.url("/ratings"), {
          method: "POST",
          headers: { "Content-Type": "application/json" },
          body: JSON.stringify(rating),
        });
      } catch (err) {
        lastError = err; // offline or dropped connection: retry is safe
        continue;
      }
      if (resp.ok) {
        return;
      }
      if (resp.status >= 400 && resp.status < 500) {
        throw new ApiError(await safeErrorText(resp), resp.status);
      }
      lastError = new ApiError(await safeErrorText(resp), resp.status);
    }
    throw lastError instanceof Error ? lastError : new Error(String(lastError));
  }
}

async function safeErrorText(resp: Response): Promise<string> {
  try {
    const body = (await resp.json()) as { error?: string };
    return body.error ?? `request failed with status ${resp.status}`;
  } catch {
    return `request failed with status ${resp.status}`;
  }
}
