/** Typed client for the annotation service's JSON API. */

export type Label = 'reasonable' | 'unreasonable';

/** Pending item as served by GET /api/next (done=false). */
export interface AnnotationItem {
  sample_id: string;
  head: string;
  relation: string;
  relation_sentence: string;
  tail: string;
  remaining: number;
}

export type NextResponse =
  | ({ done: false } & AnnotationItem)
  | { done: true; remaining: 0 };

export interface Progress {
  total_items: number;
  annotators: string[];
  completed: Record<string, number>;
  coverage: number;
}

export interface AcceptanceReport {
  per_annotator: Record<string, number | null>;
  overall: number | null;
  per_stratum: Record<string, number | null>;
  majority_acceptance: number | null;
  coverage: number;
  annotated_items: number;
  total_items: number;
}

/** Server-reported failure (4xx with an {error} body). */
export class ApiError extends Error {
  constructor(
    message: string,
    readonly status: number,
  ) {
    super(message);
    this.name = 'ApiError';
  }
}

async function parse<T>(response: Response): Promise<T> {
  const body: unknown = await response.json().catch(() => null);
  if (!response.ok) {
    const message =
      body !== null && typeof body === 'object' && 'error' in body
        ? String((body as { error: unknown }).error)
        : `request failed with status ${response.status}`;
    throw new ApiError(message, response.status);
  }
  return body as T;
}

export class ApiClient {
  /** @param base service origin, e.g. "http://127.0.0.1:8321"; "" = same origin. */
  constructor(private readonly base: string = '') {}

  async next(annotator: string): Promise<NextResponse> {
    const q = new URLSearchParams({ annotator });
    return parse(await fetch(`${this.base}/api/next?${q}`));
  }

  async judge(annotator: string, sampleId: string, label: Label): Promise<void> {
    await parse(
      await fetch(`${this.base}/api/judgment`, {
        method: 'POST',
        headers: { 'Content-Type': 'application/json' },
        body: JSON.stringify({ annotator, sample_id: sampleId, label }),
      }),
    );
  }

  async progress(): Promise<Progress> {
    return parse(await fetch(`${this.base}/api/progress`));
  }

  async acceptance(): Promise<AcceptanceReport> {
    return parse(await fetch(`${this.base}/api/acceptance`));
  }
}
