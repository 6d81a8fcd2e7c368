from functools import wraps


def non_empty(name, error=True, value=None):
    """
    This decorator makes sure the first argument of a function is not empty.
    When `error` is set we raise a `ValueError` mentioning `name`, otherwise
    the `value` is returned without calling the function.
    """

    def decorator_non_empty(func):
        @wraps(func)
        def wrapped(first, *args, **kwargs):
            if len(first) == 0:
                if error:
                    raise ValueError(f"`{func.__name__}` needs a non-empty `{name}`.")
                return value
            return func(first, *args, **kwargs)

        return wrapped

    return decorator_non_empty


def two_domains_only(method):
    """
    Handles the behavior when an `Interactions` collection was not given
    exactly two distinct domains.
    """

    @wraps(method)
    def wrapped(interactions, *args, **kwargs):
        names = [d.name for d in interactions.domains]
        if len(names) != 2 or len(set(names)) != 2:
            raise ValueError(
                f"The `{method.__name__}` verb needs exactly two distinct domains. Found: {names}."
            )
        return method(interactions, *args, **kwargs)

    return wrapped
