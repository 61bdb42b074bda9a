def test_run_doctests():
    import doctest

    import sparkattn
    from sparkattn import (
        backward,
        config,
        exceptions,
        forward,
        half,
        layout,
        mma,
        oracle,
        prng,
        softmax,
        traffic,
    )

    for mod in (
        sparkattn,
        half,
        mma,
        layout,
        softmax,
        traffic,
        exceptions,
        prng,
        config,
        forward,
        backward,
        oracle,
    ):
        doctest.testmod(mod, optionflags=doctest.ELLIPSIS, raise_on_error=True)


def test_burble_doctest():
    import doctest

    from sparkattn import burble

    # the module-level name is an instance, so testmod does not find the class
    runner = doctest.DebugRunner(optionflags=doctest.ELLIPSIS)
    for test in doctest.DocTestFinder().find(type(burble), "burble", globs={}):
        runner.run(test)
